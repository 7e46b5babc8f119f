//! Run configuration: a flat `key = value` file with `[section]` headers.
//!
//! ```text
//! seed = 7
//! output = runs/blobs
//!
//! [data]
//! dataset = blobs:10,200,20,1.0,7
//!
//! [network]
//! hidden = 64,64
//!
//! [train]
//! epochs = 60
//! batch_size = 32
//! ```
//!
//! Keys outside any section are `seed` and `output`; everything else is
//! addressed as `section.key`, which is also the form accepted by
//! [`RunConfig::set`] for command-line overrides. Unknown keys are rejected
//! with an error naming the key. `#` starts a comment.
//!
//! Only the master `seed` is configurable; every component seed is derived
//! from it by purpose.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::curvature::{CurvatureOptions, RatioForm, EXACT_LIMIT};
use crate::data::{split, Dataset, DatasetDescriptor, SplitSpec, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_ECE_BINS;
use crate::nn::NetworkSpec;
use crate::pep::{Mask, NoiseDistribution, PerturbConfig, SigmaSearchConfig};
use crate::rng::derive_seed;
use crate::temperature;
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    #[serde(serialize_with = "display_opt")]
    pub dataset: Option<DatasetDescriptor>,
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    /// Keep only labels `< classes` for training and in-distribution scoring.
    pub classes: Option<usize>,
    /// Use only the first `subset` rows of the source.
    pub subset: Option<usize>,
}

/// Test-time ensemble settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestPerturb {
    pub sigma: Option<f64>,
    pub members: usize,
    pub distribution: NoiseDistribution,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemperatureConfig {
    pub temperature: Option<f64>,
    pub low: f64,
    pub high: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvatureConfig {
    pub probes: usize,
    pub step: Option<f64>,
    pub ratio_form: RatioForm,
    pub mask: Mask,
    pub exact_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub search: SigmaSearchConfig,
    pub perturb: TestPerturb,
    pub ts: TemperatureConfig,
    pub curvature: CurvatureConfig,
    pub ece_bins: usize,
    pub kld_bins: usize,
}

fn display_opt<S: serde::Serializer>(d: &Option<DatasetDescriptor>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match d {
        Some(d) => s.serialize_str(&d.to_string()),
        None => s.serialize_none(),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output: PathBuf::from("out"),
            data: DataConfig {
                dataset: None,
                train: 0.8,
                validation: 0.1,
                test: 0.1,
                classes: None,
                subset: None,
            },
            hidden: vec![128],
            train: TrainConfig::default(),
            search: SigmaSearchConfig::default(),
            perturb: TestPerturb {
                sigma: None,
                members: 10,
                distribution: NoiseDistribution::Gaussian,
                mask: Mask::Weights,
            },
            ts: TemperatureConfig {
                temperature: None,
                low: temperature::DEFAULT_BRACKET.0,
                high: temperature::DEFAULT_BRACKET.1,
                iterations: temperature::DEFAULT_ITERATIONS,
            },
            curvature: CurvatureConfig {
                probes: 1000,
                step: None,
                ratio_form: RatioForm::ViaLogLikelihood,
                mask: Mask::All,
                exact_limit: EXACT_LIMIT,
            },
            ece_bins: DEFAULT_ECE_BINS,
            kld_bins: DEFAULT_ECE_BINS,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn opt_num<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "" | "none" | "auto" => Ok(None),
        v => num(key, v).map(Some),
    }
}

fn distribution(key: &str, value: &str) -> Result<NoiseDistribution> {
    match value {
        "gaussian" => Ok(NoiseDistribution::Gaussian),
        "uniform" => Ok(NoiseDistribution::Uniform),
        _ => Err(Error::config(
            key,
            format!("expected `gaussian` or `uniform`, got `{value}`"),
        )),
    }
}

fn mask(key: &str, value: &str) -> Result<Mask> {
    Mask::parse(value).map_err(|e| match e {
        Error::Config { detail, .. } => Error::config(key, detail),
        other => other,
    })
}

impl RunConfig {
    /// The over-trained blobs setup: 2,000 points in ten classes, a 64x64
    /// MLP trained for 60 epochs on half of them.
    pub fn overtrained_blobs(seed: u64) -> Self {
        let mut c = RunConfig {
            seed,
            ..RunConfig::default()
        };
        c.data.dataset = Some(DatasetDescriptor::Blobs {
            classes: 10,
            per_class: 200,
            dim: 20,
            spread: 1.0,
            seed,
        });
        c.data.train = 0.5;
        c.data.validation = 0.25;
        c.data.test = 0.25;
        c.hidden = vec![64, 64];
        c.train.epochs = 60;
        c.train.batch_size = 32;
        c.search.sigma_low = 2e-3;
        c.search.sigma_high = 0.2;
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply every assignment in `text` on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}", n + 1), "unterminated section header"))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            let key = key.trim();
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            self.set(&full, value.trim())?;
        }
        Ok(())
    }

    /// Apply a `section.key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(pair, "expected `section.key=value`"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, value)?,
            "output" => self.output = PathBuf::from(value),
            "data.dataset" => self.data.dataset = Some(DatasetDescriptor::parse(value)?),
            "data.train" => self.data.train = num(key, value)?,
            "data.validation" => self.data.validation = num(key, value)?,
            "data.test" => self.data.test = num(key, value)?,
            "data.classes" => self.data.classes = opt_num(key, value)?,
            "data.subset" => self.data.subset = opt_num(key, value)?,
            "network.hidden" => {
                self.hidden = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(|v| num(key, v))
                    .collect::<Result<_>>()?
            }
            "train.optimizer" => {
                self.train.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::config(key, format!("expected `adam` or `sgd`, got `{value}`"))),
                }
            }
            "train.learning_rate" => self.train.learning_rate = num(key, value)?,
            "train.beta1" => self.train.beta1 = num(key, value)?,
            "train.beta2" => self.train.beta2 = num(key, value)?,
            "train.epsilon" => self.train.epsilon = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "search.sigma_low" => self.search.sigma_low = num(key, value)?,
            "search.sigma_high" => self.search.sigma_high = num(key, value)?,
            "search.iterations" => self.search.iterations = num(key, value)?,
            "search.members" => self.search.members = num(key, value)?,
            "search.distribution" => self.search.distribution = distribution(key, value)?,
            "search.mask" => self.search.mask = mask(key, value)?,
            "perturb.sigma" => self.perturb.sigma = opt_num(key, value)?,
            "perturb.members" => self.perturb.members = num(key, value)?,
            "perturb.distribution" => self.perturb.distribution = distribution(key, value)?,
            "perturb.mask" => self.perturb.mask = mask(key, value)?,
            "ts.temperature" => self.ts.temperature = opt_num(key, value)?,
            "ts.low" => self.ts.low = num(key, value)?,
            "ts.high" => self.ts.high = num(key, value)?,
            "ts.iterations" => self.ts.iterations = num(key, value)?,
            "curvature.probes" => self.curvature.probes = num(key, value)?,
            "curvature.step" => self.curvature.step = opt_num(key, value)?,
            "curvature.ratio_form" => {
                self.curvature.ratio_form = match value {
                    "direct" => RatioForm::Direct,
                    "via_log_likelihood" => RatioForm::ViaLogLikelihood,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected `direct` or `via_log_likelihood`, got `{value}`"),
                        ))
                    }
                }
            }
            "curvature.mask" => self.curvature.mask = mask(key, value)?,
            "curvature.exact_limit" => self.curvature.exact_limit = num(key, value)?,
            "metrics.ece_bins" => self.ece_bins = num(key, value)?,
            "metrics.kld_bins" => self.kld_bins = num(key, value)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec()?;
        self.train_config().validate()?;
        self.search_config().validate()?;
        if self.perturb.members == 0 {
            return Err(Error::config("perturb.members", "must be at least 1"));
        }
        if let Some(s) = self.perturb.sigma {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::config("perturb.sigma", "must be finite and non-negative"));
            }
        }
        if !(self.ts.low > 0.0 && self.ts.low < self.ts.high) {
            return Err(Error::config("ts.low", "need 0 < ts.low < ts.high"));
        }
        if self.ts.iterations == 0 {
            return Err(Error::config("ts.iterations", "must be at least 1"));
        }
        if self.curvature.probes == 0 {
            return Err(Error::config("curvature.probes", "must be at least 1"));
        }
        if self.ece_bins == 0 {
            return Err(Error::config("metrics.ece_bins", "must be at least 1"));
        }
        if self.kld_bins == 0 {
            return Err(Error::config("metrics.kld_bins", "must be at least 1"));
        }
        if self.data.classes == Some(0) || self.data.classes == Some(1) {
            return Err(Error::config("data.classes", "must be at least 2"));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        SplitSpec::new(
            self.data.train,
            self.data.validation,
            self.data.test,
            derive_seed(self.seed, "split", 0),
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train", 0),
            ..self.train.clone()
        }
    }

    pub fn search_config(&self) -> SigmaSearchConfig {
        SigmaSearchConfig {
            seed: derive_seed(self.seed, "search", 0),
            ..self.search.clone()
        }
    }

    /// Test-time ensemble at `sigma`, on a stream separate from the search.
    pub fn perturb_config(&self, sigma: f64) -> PerturbConfig {
        PerturbConfig {
            sigma,
            members: self.perturb.members,
            distribution: self.perturb.distribution,
            mask: self.perturb.mask.clone(),
            seed: derive_seed(self.seed, "test-members", 0),
        }
    }

    pub fn curvature_options(&self) -> CurvatureOptions {
        CurvatureOptions {
            step: self.curvature.step,
            probes: self.curvature.probes,
            seed: derive_seed(self.seed, "curvature", 0),
            mask: self.curvature.mask.clone(),
            ratio_form: self.curvature.ratio_form,
            exact_limit: self.curvature.exact_limit,
        }
    }

    pub fn network(&self, input: usize, classes: usize) -> Result<NetworkSpec> {
        NetworkSpec::mlp(input, &self.hidden, classes)
    }

    /// Load the dataset and tag every row with its split.
    pub fn load_data(&self) -> Result<Splits> {
        let descriptor = self
            .data
            .dataset
            .as_ref()
            .ok_or_else(|| Error::config("data.dataset", "no dataset configured"))?;
        let mut source = descriptor.load()?;
        if let Some(n) = self.data.subset {
            if n == 0 {
                return Err(Error::config("data.subset", "must be at least 1"));
            }
            let keep: Vec<usize> = (0..n.min(source.len())).collect();
            source = source.select(&keep)?;
        }
        let tagged = split(&source, &self.split_spec()?)?;
        Ok(Splits {
            all: tagged,
            classes: self.data.classes,
        })
    }
}

/// A tagged dataset plus the optional in-distribution class restriction.
#[derive(Debug, Clone)]
pub struct Splits {
    pub all: Dataset,
    pub classes: Option<usize>,
}

impl Splits {
    /// Rows of `tag`, restricted to the in-distribution classes.
    pub fn part(&self, tag: SplitTag) -> Result<Dataset> {
        let part = self.all.part(tag)?;
        match self.classes {
            Some(k) => part.filter_labels(|l| l < k)?.with_class_count(k),
            None => Ok(part),
        }
    }

    /// Test rows whose labels fall outside the in-distribution classes.
    pub fn held_out(&self) -> Result<Option<Dataset>> {
        match self.classes {
            Some(k) => Ok(Some(self.all.part(SplitTag::Test)?.filter_labels(|l| l >= k)?)),
            None => Ok(None),
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.unwrap_or(self.all.class_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let c = RunConfig::parse(
            "seed = 3 # master\noutput = /tmp/x\n\n[data]\ndataset = blobs:3,10,2,0.5,1\nclasses = 2\n[network]\nhidden = 8, 4\n[train]\nepochs = 2\noptimizer = sgd\n[search]\nmask = 0:weight\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.output, PathBuf::from("/tmp/x"));
        assert_eq!(c.data.classes, Some(2));
        assert_eq!(c.hidden, vec![8, 4]);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(c.search.mask, Mask::Segments(vec![(0, crate::nn::SegmentKind::Weight)]));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[train]\nepoch = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("train.epoch"), "{err}");
        let err = RunConfig::parse("[train]\nepochs = three\n").unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::parse("[train]\nepochs = 3\n").unwrap();
        c.set_pair("train.epochs=9").unwrap();
        assert_eq!(c.train.epochs, 9);
        assert!(c.set_pair("nonsense").is_err());
    }

    #[test]
    fn empty_hidden_list_means_linear_model() {
        let c = RunConfig::parse("[network]\nhidden =\n").unwrap();
        assert!(c.hidden.is_empty());
    }

    #[test]
    fn component_seeds_differ_and_follow_master() {
        let a = RunConfig::overtrained_blobs(1);
        let b = RunConfig::overtrained_blobs(2);
        assert_ne!(a.train_config().seed, a.search_config().seed);
        assert_ne!(a.search_config().seed, a.perturb_config(0.1).seed);
        assert_ne!(a.train_config().seed, b.train_config().seed);
        assert_eq!(a.train_config(), RunConfig::overtrained_blobs(1).train_config());
    }

    #[test]
    fn collapsed_sigma_range_is_a_config_error() {
        let mut c = RunConfig::overtrained_blobs(0);
        c.search.sigma_high = c.search.sigma_low;
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn class_restriction_and_held_out_rows() {
        let mut c = RunConfig::default();
        c.set("data.dataset", "blobs:4,20,2,0.5,1").unwrap();
        c.set("data.classes", "2").unwrap();
        let s = c.load_data().unwrap();
        let test = s.part(SplitTag::Test).unwrap();
        assert_eq!(test.class_count(), 2);
        assert!(test.labels().iter().all(|&l| l < 2));
        let out = s.held_out().unwrap().unwrap();
        assert!(out.labels().iter().all(|&l| l >= 2));
        assert_eq!(test.len() + out.len(), s.all.part(SplitTag::Test).unwrap().len());
    }
}
