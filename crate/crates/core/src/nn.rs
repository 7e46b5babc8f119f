//! Dense feed-forward softmax classifiers.
//!
//! A [`NetworkSpec`] describes a chain of affine layers, each followed by an
//! activation. The last layer produces logits (identity activation); the
//! class distribution is obtained with [`softmax`].
//!
//! Parameters live in one flat [`ParamVector`]. The layout is fixed so that
//! checkpoints are portable:
//!
//! - layers in ascending index order,
//! - within a layer, the weight matrix first and then the bias vector,
//! - weight matrices have shape `(output_width, input_width)` and are stored
//!   row-major, so the weight from input `i` to output `o` sits at
//!   `offset + o * input_width + i`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Probability floor used when a probability arrives without its logits.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    /// Code used by the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// Architecture of a dense classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape {
                layer: 0,
                detail: "network has no layers".into(),
            });
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.input == 0 || layer.output == 0 {
                return Err(Error::Shape {
                    layer: l,
                    detail: "zero-width layer".into(),
                });
            }
            if l > 0 && layers[l - 1].output != layer.input {
                return Err(Error::Shape {
                    layer: l,
                    detail: format!(
                        "input width {} does not chain from previous output width {}",
                        layer.input,
                        layers[l - 1].output
                    ),
                });
            }
        }
        let last = layers.len() - 1;
        if layers[last].activation != Activation::Identity {
            return Err(Error::Shape {
                layer: last,
                detail: "final layer must emit logits (identity activation)".into(),
            });
        }
        if layers[last].output < 2 {
            return Err(Error::Shape {
                layer: last,
                detail: "a classifier needs at least two classes".into(),
            });
        }
        Ok(NetworkSpec { layers })
    }

    /// ReLU hidden layers of the given widths followed by a logit layer.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| LayerSpec {
                input: widths[l],
                output: widths[l + 1],
                activation: if l + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        NetworkSpec::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.input * l.output + l.output).sum()
    }

    pub fn layout(&self) -> Vec<Segment> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            for (kind, len) in [
                (SegmentKind::Weight, layer.input * layer.output),
                (SegmentKind::Bias, layer.output),
            ] {
                out.push(Segment {
                    layer: l,
                    kind,
                    offset,
                    len,
                });
                offset += len;
            }
        }
        out
    }

    fn max_width(&self) -> usize {
        self.layers.iter().map(|l| l.input.max(l.output)).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Weight,
    Bias,
}

/// One contiguous block of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// All trainable parameters of a network, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        }
    }

    pub fn from_values(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        let expected = spec.param_count();
        if values.len() != expected {
            return Err(Error::Layout(format!(
                "spec needs {expected} parameters, got {}",
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {k} is not finite")));
        }
        Ok(ParamVector {
            values,
            layout: spec.layout(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, layer: usize, kind: SegmentKind) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.layer == layer && s.kind == kind)
            .map(|s| &self.values[s.range()])
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Layout(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(ParamVector {
            values,
            layout: self.layout.clone(),
        })
    }

    fn matches(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layout != spec.layout() {
            return Err(Error::Layout(format!(
                "parameter vector of length {} does not match the network layout ({} parameters)",
                self.values.len(),
                spec.param_count()
            )));
        }
        Ok(())
    }

    pub fn unflatten(&self) -> Vec<LayerParams> {
        self.layout
            .chunks(2)
            .map(|pair| LayerParams {
                weights: self.values[pair[0].range()].to_vec(),
                biases: self.values[pair[1].range()].to_vec(),
            })
            .collect()
    }
}

/// Per-layer view of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Row-major `(output, input)`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

pub fn flatten(spec: &NetworkSpec, layers: &[LayerParams]) -> Result<ParamVector> {
    if layers.len() != spec.layers().len() {
        return Err(Error::Layout(format!(
            "{} layer blocks for a {}-layer network",
            layers.len(),
            spec.layers().len()
        )));
    }
    let mut values = Vec::with_capacity(spec.param_count());
    for (l, (ls, lp)) in spec.layers().iter().zip(layers).enumerate() {
        if lp.weights.len() != ls.input * ls.output || lp.biases.len() != ls.output {
            return Err(Error::Layout(format!(
                "layer {l}: expected {}x{} weights and {} biases, got {} and {}",
                ls.output,
                ls.input,
                ls.output,
                lp.weights.len(),
                lp.biases.len()
            )));
        }
        values.extend_from_slice(&lp.weights);
        values.extend_from_slice(&lp.biases);
    }
    ParamVector::from_values(spec, values)
}

/// Row-stochastic matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    /// Validates entries in `[0, 1]` and row sums within `1e-9` of one.
    pub fn new(m: Matrix) -> Result<Self> {
        for (i, row) in m.iter_rows().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Numeric(format!("row {i} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!("row {i} sums to {s}")));
            }
        }
        Ok(ProbMatrix(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ProbMatrix::new(Matrix::from_rows(rows)?)
    }

    pub(crate) fn new_unchecked(m: Matrix) -> Self {
        ProbMatrix(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Forward pass for a single example. `scratch` must hold two buffers of at
/// least the widest layer.
fn forward_row(spec: &NetworkSpec, params: &[f64], x: &[f64], out: &mut [f64], bufs: &mut [Vec<f64>; 2]) {
    let [cur, next] = bufs;
    cur.clear();
    cur.extend_from_slice(x);
    let mut offset = 0;
    for layer in spec.layers() {
        let w = &params[offset..offset + layer.input * layer.output];
        let b = &params[offset + layer.input * layer.output..offset + layer.input * layer.output + layer.output];
        offset += layer.input * layer.output + layer.output;
        next.clear();
        for o in 0..layer.output {
            let row = &w[o * layer.input..(o + 1) * layer.input];
            let z: f64 = row.iter().zip(cur.iter()).map(|(a, b)| a * b).sum::<f64>() + b[o];
            next.push(layer.activation.apply(z));
        }
        std::mem::swap(cur, next);
    }
    out.copy_from_slice(cur);
}

fn check_inputs(spec: &NetworkSpec, params: &ParamVector, features: &Matrix) -> Result<()> {
    params.matches(spec)?;
    if features.cols() != spec.input_width() {
        return Err(Error::Shape {
            layer: 0,
            detail: format!(
                "features have width {}, layer 0 expects {}",
                features.cols(),
                spec.input_width()
            ),
        });
    }
    Ok(())
}

/// Logits for every row of `features`.
pub fn forward(spec: &NetworkSpec, params: &ParamVector, features: &Matrix) -> Result<Matrix> {
    check_inputs(spec, params, features)?;
    let k = spec.class_count();
    let mut logits = Matrix::zeros(features.rows(), k);
    let width = spec.max_width();
    logits.as_mut_slice().par_chunks_mut(k).enumerate().for_each_init(
        || [Vec::with_capacity(width), Vec::with_capacity(width)],
        |bufs, (i, out)| forward_row(spec, params.values(), features.row(i), out, bufs),
    );
    if !logits.all_finite() {
        return Err(Error::Numeric("forward pass produced non-finite logits".into()));
    }
    Ok(logits)
}

fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log of the softmax probability of class `label`, by log-sum-exp.
#[inline]
pub fn log_softmax_at(z: &[f64], label: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    z[label] - max - lse
}

pub fn softmax(logits: &Matrix) -> Result<ProbMatrix> {
    if !logits.all_finite() {
        return Err(Error::Numeric("softmax input contains non-finite logits".into()));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        softmax_into(logits.row(i), out.row_mut(i));
    }
    Ok(ProbMatrix::new_unchecked(out))
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape {
            layer: 0,
            detail: format!("{rows} rows but {} labels", labels.len()),
        });
    }
    if let Some(i) = labels.iter().position(|&y| y >= classes) {
        return Err(Error::Shape {
            layer: 0,
            detail: format!("label {} at row {i} is not below {classes}", labels[i]),
        });
    }
    Ok(())
}

/// `ln p(y_i)` for each row, computed from logits.
pub fn log_likelihoods_from_logits(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(labels, logits.rows(), logits.cols())?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| log_softmax_at(logits.row(i), y))
        .collect())
}

/// Per-example log-likelihoods read off a probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihoods {
    pub values: Vec<f64>,
    /// Rows whose true-label probability was zero and got [`PROB_FLOOR`].
    pub floored: usize,
}

impl LogLikelihoods {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }
}

pub fn per_example_log_likelihood(probs: &ProbMatrix, labels: &[usize]) -> Result<LogLikelihoods> {
    check_labels(labels, probs.rows(), probs.classes())?;
    let mut floored = 0;
    let values = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = probs.row(i)[y];
            if p < PROB_FLOOR {
                floored += 1;
                PROB_FLOOR.ln()
            } else {
                p.ln()
            }
        })
        .collect();
    Ok(LogLikelihoods { values, floored })
}

/// Buffers for one backward pass.
struct Tape {
    /// Activations entering each layer (index 0 is the input) plus the logits.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Tape {
    fn new(spec: &NetworkSpec) -> Self {
        let mut acts = vec![vec![0.0; spec.input_width()]];
        let mut pre = Vec::new();
        for l in spec.layers() {
            acts.push(vec![0.0; l.output]);
            pre.push(vec![0.0; l.output]);
        }
        let w = spec.max_width();
        Tape {
            acts,
            pre,
            delta: vec![0.0; w],
            delta_prev: vec![0.0; w],
        }
    }
}

/// Adds `d ln p(y | x) / d theta` into `grad`. Returns `ln p(y | x)`.
fn backprop_example(spec: &NetworkSpec, params: &[f64], x: &[f64], y: usize, grad: &mut [f64], tape: &mut Tape) -> f64 {
    let layers = spec.layers();
    tape.acts[0].copy_from_slice(x);
    let mut offsets = Vec::with_capacity(layers.len());
    let mut offset = 0;
    for (l, layer) in layers.iter().enumerate() {
        offsets.push(offset);
        let wlen = layer.input * layer.output;
        let (w, b) = (
            &params[offset..offset + wlen],
            &params[offset + wlen..offset + wlen + layer.output],
        );
        offset += wlen + layer.output;
        let (head, tail) = tape.acts.split_at_mut(l + 1);
        let input = &head[l];
        let out = &mut tail[0];
        for o in 0..layer.output {
            let z: f64 = w[o * layer.input..(o + 1) * layer.input]
                .iter()
                .zip(input.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + b[o];
            tape.pre[l][o] = z;
            out[o] = layer.activation.apply(z);
        }
    }

    let logits = &tape.acts[layers.len()];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let ll = logits[y] - max - sum.ln();
    // d ln softmax_y / dz_k = 1[k = y] - p_k
    for (c, (&z, d)) in logits.iter().zip(tape.delta.iter_mut()).enumerate() {
        let p = (z - max).exp() / sum;
        *d = if c == y { 1.0 - p } else { -p };
    }

    for l in (0..layers.len()).rev() {
        let layer = layers[l];
        let wlen = layer.input * layer.output;
        let off = offsets[l];
        let input = &tape.acts[l];
        {
            let (gw, gb) = grad[off..off + wlen + layer.output].split_at_mut(wlen);
            for o in 0..layer.output {
                let d = tape.delta[o];
                gb[o] += d;
                if d != 0.0 {
                    for (g, &a) in gw[o * layer.input..(o + 1) * layer.input].iter_mut().zip(input.iter()) {
                        *g += d * a;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params[off..off + wlen];
        let prev_act = layers[l - 1].activation;
        for i in 0..layer.input {
            let mut s = 0.0;
            for o in 0..layer.output {
                s += w[o * layer.input + i] * tape.delta[o];
            }
            tape.delta_prev[i] = s * prev_act.derivative(tape.pre[l - 1][i]);
        }
        std::mem::swap(&mut tape.delta, &mut tape.delta_prev);
    }
    ll
}

const GRAD_CHUNK: usize = 64;

/// Gradient of the summed log-likelihood over the batch.
///
/// Examples are reduced in fixed chunks of 64, summed sequentially inside a
/// chunk and across chunks in index order, so the result does not depend on
/// the thread count.
pub fn gradient(spec: &NetworkSpec, params: &ParamVector, features: &Matrix, labels: &[usize]) -> Result<ParamVector> {
    let (grad, _) = gradient_and_loglik(spec, params, features, labels)?;
    Ok(grad)
}

/// Like [`gradient`], also returning the summed log-likelihood.
pub fn gradient_and_loglik(
    spec: &NetworkSpec,
    params: &ParamVector,
    features: &Matrix,
    labels: &[usize],
) -> Result<(ParamVector, f64)> {
    check_inputs(spec, params, features)?;
    check_labels(labels, features.rows(), spec.class_count())?;
    if features.rows() == 0 {
        return Err(Error::EmptyDataset("gradient of an empty batch".into()));
    }
    let p = params.len();
    let partials: Vec<(Vec<f64>, f64)> = (0..features.rows())
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|idx| {
            let mut tape = Tape::new(spec);
            let mut g = vec![0.0; p];
            let mut ll = 0.0;
            for &i in idx {
                ll += backprop_example(spec, params.values(), features.row(i), labels[i], &mut g, &mut tape);
            }
            (g, ll)
        })
        .collect();
    let mut total = vec![0.0; p];
    let mut ll = 0.0;
    for (g, l) in partials {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
        ll += l;
    }
    if !ll.is_finite() || total.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((params.with_values(total)?, ll))
}

/// `∇ ln p(y_i | x_i)` for every example, plus each `ln p(y_i | x_i)`.
pub fn per_example_gradients(
    spec: &NetworkSpec,
    params: &ParamVector,
    features: &Matrix,
    labels: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    check_inputs(spec, params, features)?;
    check_labels(labels, features.rows(), spec.class_count())?;
    let p = params.len();
    let out: Vec<(Vec<f64>, f64)> = (0..features.rows())
        .into_par_iter()
        .map_init(
            || Tape::new(spec),
            |tape, i| {
                let mut g = vec![0.0; p];
                let ll = backprop_example(spec, params.values(), features.row(i), labels[i], &mut g, tape);
                (g, ll)
            },
        )
        .collect();
    Ok(out.into_iter().unzip())
}

/// Mean log-likelihood of `labels` under the network, from logits.
pub fn mean_log_likelihood(
    spec: &NetworkSpec,
    params: &ParamVector,
    features: &Matrix,
    labels: &[usize],
) -> Result<f64> {
    let logits = forward(spec, params, features)?;
    let ll = log_likelihoods_from_logits(&logits, labels)?;
    if ll.is_empty() {
        return Err(Error::EmptyDataset("mean log-likelihood of no examples".into()));
    }
    Ok(ll.iter().sum::<f64>() / ll.len() as f64)
}
