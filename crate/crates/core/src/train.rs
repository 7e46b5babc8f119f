//! Maximum-likelihood training of the base classifier with per-epoch
//! checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{shuffle, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec, ParamVector, SegmentKind};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
            epochs: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("train.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("train.epsilon", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Adam, written for minimization.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

enum Optimizer {
    Sgd(f64),
    Adam(Adam),
}

impl Optimizer {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd(lr) => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam(a) => a.step(params, grad),
        }
    }
}

/// He-uniform weights, zero biases.
pub fn initialize(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, "init", 0);
    let mut params = ParamVector::zeros(spec);
    let layout = params.layout().to_vec();
    let values = params.values_mut();
    for seg in layout.iter().filter(|s| s.kind == SegmentKind::Weight) {
        let fan_in = spec.layers()[seg.layer].input as f64;
        let limit = (6.0 / fan_in).sqrt();
        for v in &mut values[seg.range()] {
            *v = rng.random_range(-limit..limit);
        }
    }
    params
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: ParamVector,
    pub train_nll: f64,
    pub val_nll: f64,
}

/// One checkpoint per completed epoch, epochs numbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSeries {
    pub spec: NetworkSpec,
    pub checkpoints: Vec<Checkpoint>,
}

impl CheckpointSeries {
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("epoch_{epoch:03}.pepckpt"))
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_nll,val_nll\n");
        for c in &self.checkpoints {
            let _ = writeln!(s, "{},{:?},{:?}", c.epoch, c.train_nll, c.val_nll);
        }
        s
    }

    /// Writes `epoch_NNN.pepckpt` for each epoch plus `metrics.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for c in &self.checkpoints {
            checkpoint::save(&Self::checkpoint_path(dir, c.epoch), &self.spec, &c.params)?;
        }
        let metrics = dir.join("metrics.csv");
        fs::write(&metrics, self.metrics_csv()).map_err(|e| Error::io(&metrics, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let metrics_path = dir.join("metrics.csv");
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("epoch,train_nll,val_nll") {
            return Err(Error::Checkpoint(format!(
                "{}: unexpected header",
                metrics_path.display()
            )));
        }
        let mut spec = None;
        let mut checkpoints = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Checkpoint(format!("{}: bad row `{line}`", metrics_path.display()));
            if f.len() != 3 {
                return Err(bad());
            }
            let epoch: usize = f[0].parse().map_err(|_| bad())?;
            let (s, params) = checkpoint::load(&Self::checkpoint_path(dir, epoch))?;
            if spec.get_or_insert_with(|| s.clone()) != &s {
                return Err(Error::Checkpoint(format!("epoch {epoch} has a different architecture")));
            }
            checkpoints.push(Checkpoint {
                epoch,
                params,
                train_nll: f[1].parse().map_err(|_| bad())?,
                val_nll: f[2].parse().map_err(|_| bad())?,
            });
        }
        let spec = spec.ok_or_else(|| Error::EmptyDataset(format!("{} lists no epochs", metrics_path.display())))?;
        Ok(CheckpointSeries { spec, checkpoints })
    }
}

/// Mean negative log-likelihood per example.
pub fn mean_nll(spec: &NetworkSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    Ok(-nn::mean_log_likelihood(spec, params, data.features(), data.labels())?)
}

/// Train on the `train` split, scoring each epoch on `train` and `validation`.
pub fn train(spec: &NetworkSpec, dataset: &Dataset, config: &TrainConfig) -> Result<CheckpointSeries> {
    config.validate()?;
    let train_set = dataset.part(SplitTag::Train)?;
    let val_set = dataset.part(SplitTag::Validation)?;
    train_on(spec, &train_set, &val_set, config)
}

/// Same as [`train`] with explicit train and validation sets.
pub fn train_on(
    spec: &NetworkSpec,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<CheckpointSeries> {
    config.validate()?;
    if train_set.dim() != spec.input_width() {
        return Err(Error::Shape {
            layer: 0,
            detail: format!(
                "dataset width {} but layer 0 expects {}",
                train_set.dim(),
                spec.input_width()
            ),
        });
    }
    if train_set.class_count() > spec.class_count() {
        return Err(Error::Shape {
            layer: spec.layers().len() - 1,
            detail: format!(
                "dataset has {} classes but the network emits {}",
                train_set.class_count(),
                spec.class_count()
            ),
        });
    }
    let mut params = initialize(spec, config.seed);
    let mut opt = match config.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(config.learning_rate),
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(
            params.len(),
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.epsilon,
        )),
    };
    let mut series = CheckpointSeries {
        spec: spec.clone(),
        checkpoints: Vec::with_capacity(config.epochs),
    };
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        shuffle(&mut order, &mut rng::stream(config.seed, "shuffle", epoch as u64));
        for batch in order.chunks(config.batch_size) {
            let x = train_set.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_set.labels()[i]).collect();
            let grad = match nn::gradient(spec, &params, &x, &y) {
                Ok(g) => g,
                Err(Error::Numeric(_)) => return Err(diverged(epoch, series)),
                Err(e) => return Err(e),
            };
            // Minimize the mean negative log-likelihood of the batch.
            let scale = -1.0 / batch.len() as f64;
            let g: Vec<f64> = grad.values().iter().map(|v| v * scale).collect();
            opt.step(params.values_mut(), &g);
        }
        let scores = mean_nll(spec, &params, train_set).and_then(|t| Ok((t, mean_nll(spec, &params, val_set)?)));
        let (train_nll, val_nll) = match scores {
            Ok((t, v)) if t.is_finite() && v.is_finite() => (t, v),
            Ok(_) | Err(Error::Numeric(_)) => return Err(diverged(epoch, series)),
            Err(e) => return Err(e),
        };
        series.checkpoints.push(Checkpoint {
            epoch,
            params: params.clone(),
            train_nll,
            val_nll,
        });
    }
    Ok(series)
}

fn diverged(epoch: usize, series: CheckpointSeries) -> Error {
    Error::Diverged {
        epoch,
        completed: Box::new(series),
    }
}

/// Mean test NLL minus mean train NLL.
pub fn overfit_gap(spec: &NetworkSpec, params: &ParamVector, train: &Dataset, test: &Dataset) -> Result<f64> {
    Ok(mean_nll(spec, params, test)? - mean_nll(spec, params, train)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_blobs, SplitSpec};

    #[test]
    fn adam_matches_hand_stepped_quadratic() {
        // f(x) = (x - 3)^2, gradient 2(x - 3), from x = 0.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut adam = Adam::new(1, lr, b1, b2, eps);
        let mut x = [0.0];
        let (mut xh, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (x[0] - 3.0);
            adam.step(&mut x, &[g]);
            let gh = 2.0 * (xh - 3.0);
            m = b1 * m + (1.0 - b1) * gh;
            v = b2 * v + (1.0 - b2) * gh * gh;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            xh -= lr * mh / (vh.sqrt() + eps);
            assert!((x[0] - xh).abs() < 1e-12);
        }
        // The first bias-corrected Adam step has magnitude lr exactly.
        assert!((x[0] - 0.3).abs() < 1e-3);
    }

    #[test]
    fn he_uniform_init_is_bounded_and_seeded() {
        let spec = NetworkSpec::mlp(6, &[5], 3).unwrap();
        let p = initialize(&spec, 4);
        assert_eq!(p, initialize(&spec, 4));
        assert_ne!(p, initialize(&spec, 5));
        let w0 = p.segment(0, SegmentKind::Weight).unwrap();
        assert!(w0.iter().all(|v| v.abs() <= 1.0));
        assert!(p.segment(0, SegmentKind::Bias).unwrap().iter().all(|&v| v == 0.0));
        assert!(p
            .segment(1, SegmentKind::Weight)
            .unwrap()
            .iter()
            .all(|v| v.abs() <= (6.0f64 / 5.0).sqrt()));
    }

    fn separable() -> Dataset {
        let d = synth_blobs(3, 100, 4, 0.05, 2).unwrap();
        split(&d, &SplitSpec::new(0.8, 0.1, 0.1, 2).unwrap()).unwrap()
    }

    #[test]
    fn separable_blobs_reach_low_nll() {
        let d = separable();
        let spec = NetworkSpec::mlp(4, &[16], 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let series = train(&spec, &d, &cfg).unwrap();
        assert_eq!(series.len(), 15);
        assert!(series.last().unwrap().train_nll < 0.05, "{:?}", series.metrics_csv());
        let non_monotone = series
            .checkpoints
            .windows(2)
            .filter(|w| w[1].train_nll > w[0].train_nll)
            .count();
        assert!(non_monotone <= 2);
        for (i, c) in series.checkpoints.iter().enumerate() {
            assert_eq!(c.epoch, i + 1);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let d = separable();
        let spec = NetworkSpec::mlp(4, &[8], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let a = train(&spec, &d, &cfg).unwrap();
        let b = train(&spec, &d, &cfg).unwrap();
        assert_eq!(a, b);
        let one = train(&spec, &d, &TrainConfig { epochs: 1, ..cfg }).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn divergence_returns_completed_epochs() {
        let d = separable();
        let spec = NetworkSpec::mlp(4, &[8], 3).unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e200,
            epochs: 5,
            ..TrainConfig::default()
        };
        match train(&spec, &d, &cfg) {
            Err(Error::Diverged { epoch, completed }) => assert_eq!(completed.len(), epoch - 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_names_the_key() {
        let bad = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "train.beta1"));
    }

    #[test]
    fn overfit_gap_of_identical_sets_is_zero() {
        let d = separable();
        let spec = NetworkSpec::mlp(4, &[8], 3).unwrap();
        let p = initialize(&spec, 1);
        let tr = d.part(SplitTag::Train).unwrap();
        assert_eq!(overfit_gap(&spec, &p, &tr, &tr).unwrap(), 0.0);
    }

    #[test]
    fn overfit_gap_of_random_net_is_sampling_noise() {
        let d = synth_blobs(3, 400, 4, 1.0, 8).unwrap();
        let d = split(&d, &SplitSpec::new(0.5, 0.25, 0.25, 8).unwrap()).unwrap();
        let spec = NetworkSpec::mlp(4, &[8], 3).unwrap();
        let p = initialize(&spec, 2);
        let per_example = |set: &Dataset| {
            let logits = nn::forward(&spec, &p, set.features()).unwrap();
            nn::log_likelihoods_from_logits(&logits, set.labels()).unwrap()
        };
        let tr = d.part(SplitTag::Train).unwrap();
        let te = d.part(SplitTag::Test).unwrap();
        let (a, b) = (per_example(&tr), per_example(&te));
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64
        };
        let se = (var(&a) + var(&b)).sqrt();
        let gap = overfit_gap(&spec, &p, &tr, &te).unwrap();
        assert!(gap.abs() < 3.0 * se, "gap {gap} se {se}");
    }

    #[test]
    fn series_dir_round_trip() {
        let d = separable();
        let spec = NetworkSpec::mlp(4, &[4], 3).unwrap();
        let series = train(
            &spec,
            &d,
            &TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        series.write_dir(dir.path()).unwrap();
        assert_eq!(CheckpointSeries::read_dir(dir.path()).unwrap(), series);
    }
}
