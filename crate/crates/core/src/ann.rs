//! Bias-free dense feed-forward networks trained with mini-batch gradient
//! descent and back-propagation.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mnist_data::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
    /// Hinge on the margin between the true class and the strongest wrong
    /// class; only those two output units receive gradient.
    HingeWinnerRunnerup,
}

pub const HINGE_MARGIN: f64 = 1.0;

/// Index of the largest value; ties resolve to the lowest index. The flag is
/// set when the maximum is shared.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
            tie = false;
        } else if v == values[best] {
            tie = true;
        }
    }
    (best, tie)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnModel {
    layer_dims: Vec<usize>,
    /// One `(out, in)` matrix per consecutive layer pair.
    weights: Vec<Array2<f64>>,
    pub output_head: OutputHead,
    pub loss: LossKind,
    /// Weights are projected onto `w >= 0` after every update.
    pub non_negative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, batch_size: 64, epochs: 30, rng_seed: 0, l2: 0.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pre-activations and activations of every layer for a batch (rows = samples).
/// `act[0]` is the input; `pre[l]` feeds `act[l + 1]`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub pre: Vec<Array2<f64>>,
    pub act: Vec<Array2<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &Array2<f64> {
        self.act.last().expect("forward pass has an input layer")
    }
}

/// Training targets: class indices or explicit target vectors.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    Dense(ArrayView2<'a, f64>),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Dense(t) => t.nrows(),
        }
    }

    fn class(&self, i: usize) -> usize {
        match self {
            Targets::Labels(l) => l[i],
            Targets::Dense(t) => argmax(&t.row(i).to_vec()).0,
        }
    }

    fn target(&self, i: usize, k: usize) -> f64 {
        match self {
            Targets::Labels(l) => (l[i] == k) as u8 as f64,
            Targets::Dense(t) => t[[i, k]],
        }
    }
}

pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Copies dataset rows `idx` into a dense batch.
pub fn batch_matrix(data: &Dataset, idx: &[usize]) -> Array2<f64> {
    let dim = data.input_dim();
    let mut x = Array2::zeros((idx.len(), dim));
    for (mut row, &i) in x.rows_mut().into_iter().zip(idx) {
        for (dst, &src) in row.iter_mut().zip(data.image(i)) {
            *dst = src as f64;
        }
    }
    x
}

impl AnnModel {
    /// Glorot-uniform initialisation from `seed`. Non-negative models start from
    /// the absolute values of the same draw.
    pub fn new(
        layer_dims: &[usize],
        output_head: OutputHead,
        loss: LossKind,
        non_negative: bool,
        seed: u64,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {layer_dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                Array2::from_shape_fn((fan_out, fan_in), |_| {
                    let v = dist.sample(&mut rng);
                    if non_negative {
                        v.abs()
                    } else {
                        v
                    }
                })
            })
            .collect();
        Self::from_weights(weights, output_head, loss, non_negative)
    }

    pub fn from_weights(
        weights: Vec<Array2<f64>>,
        output_head: OutputHead,
        loss: LossKind,
        non_negative: bool,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("model needs at least one weight matrix".into()));
        }
        let mut layer_dims = vec![weights[0].ncols()];
        for w in &weights {
            let prev = *layer_dims.last().unwrap();
            if w.ncols() != prev {
                return Err(Error::Shape { expected: prev, got: w.ncols() });
            }
            layer_dims.push(w.nrows());
        }
        if loss == LossKind::CrossEntropy && output_head != OutputHead::Softmax {
            return Err(Error::Config("cross-entropy needs a softmax output head".into()));
        }
        if non_negative && weights.iter().any(|w| w.iter().any(|&v| v < 0.0)) {
            return Err(Error::Config("non-negative model holds negative weights".into()));
        }
        Ok(Self { layer_dims, weights, output_head, loss, non_negative })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// Total neuron count excluding the input layer.
    pub fn neuron_count(&self) -> usize {
        self.layer_dims[1..].iter().sum()
    }

    /// Replaces all weights. Shapes must match and the non-negative
    /// constraint must hold.
    pub fn set_weights(&mut self, weights: Vec<Array2<f64>>) -> Result<()> {
        let updated = Self::from_weights(weights, self.output_head, self.loss, self.non_negative)?;
        if updated.layer_dims != self.layer_dims {
            return Err(Error::Config("replacement weights change the layer layout".into()));
        }
        *self = updated;
        Ok(())
    }

    /// Scales every weight by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let weights = self.weights.iter().map(|w| w * factor).collect();
        Self::from_weights(weights, self.output_head, self.loss, self.non_negative && factor >= 0.0)
    }

    pub fn apply_head(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.output_head {
            OutputHead::Relu => z.mapv(relu),
            OutputHead::Softmax => softmax_rows(z),
        }
    }

    /// Activations of every layer for one input vector (input layer first).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), got: x.len() });
        }
        let batch = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        let pass = self.forward_batch(batch)?;
        Ok(pass.act.into_iter().map(|a| a.into_raw_vec_and_offset().0).collect())
    }

    pub fn forward_batch(&self, x: Array2<f64>) -> Result<ForwardPass> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), got: x.ncols() });
        }
        let last = self.weights.len() - 1;
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut act = Vec::with_capacity(self.weights.len() + 1);
        act.push(x);
        for (l, w) in self.weights.iter().enumerate() {
            let z = act[l].dot(&w.t());
            let a = if l == last { self.apply_head(&z) } else { z.mapv(relu) };
            pre.push(z);
            act.push(a);
        }
        Ok(ForwardPass { pre, act })
    }

    /// Mean loss over the batch and its gradient with respect to the output
    /// pre-activations.
    pub fn output_delta(&self, pass: &ForwardPass, targets: &Targets) -> Result<(f64, Array2<f64>)> {
        let z = pass.pre.last().unwrap();
        let out = pass.output();
        let (n, k) = out.dim();
        if targets.len() != n {
            return Err(Error::Shape { expected: n, got: targets.len() });
        }
        let mut loss = 0.0;
        // dL/d(head output), later mapped through the head
        let mut g = Array2::<f64>::zeros((n, k));
        match self.loss {
            LossKind::CrossEntropy => {
                // fused softmax + cross-entropy
                let mut delta = out.clone();
                for i in 0..n {
                    let mut mass = 0.0;
                    for c in 0..k {
                        let t = targets.target(i, c);
                        mass += t;
                        if t != 0.0 {
                            loss -= t * out[[i, c]].max(f64::MIN_POSITIVE).ln();
                        }
                    }
                    for c in 0..k {
                        delta[[i, c]] = out[[i, c]] * mass - targets.target(i, c);
                    }
                }
                delta /= n as f64;
                return Ok((loss / n as f64, delta));
            }
            LossKind::Mse => {
                for i in 0..n {
                    for c in 0..k {
                        let d = out[[i, c]] - targets.target(i, c);
                        loss += 0.5 * d * d;
                        g[[i, c]] = d;
                    }
                }
            }
            LossKind::HingeWinnerRunnerup => {
                for i in 0..n {
                    let y = targets.class(i);
                    let row = out.row(i);
                    let runner = (0..k)
                        .filter(|&c| c != y)
                        .fold(None, |best: Option<usize>, c| match best {
                            Some(b) if row[b] >= row[c] => Some(b),
                            _ => Some(c),
                        })
                        .expect("at least two classes");
                    let l = HINGE_MARGIN - (row[y] - row[runner]);
                    if l > 0.0 {
                        loss += l;
                        g[[i, y]] = -1.0;
                        g[[i, runner]] = 1.0;
                    }
                }
            }
        }
        let mut delta = match self.output_head {
            OutputHead::Relu => {
                g.zip_mut_with(z, |gv, &zv| {
                    if zv <= 0.0 {
                        *gv = 0.0
                    }
                });
                g
            }
            OutputHead::Softmax => {
                let mut d = g;
                for (mut drow, prow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    drow.zip_mut_with(&prow, |dv, &p| *dv = p * (*dv - dot));
                }
                d
            }
        };
        delta /= n as f64;
        Ok((loss / n as f64, delta))
    }

    /// Back-propagates `delta_out` through a forward pass. Hidden-layer
    /// derivatives use `pre > 0`.
    pub fn backward(&self, pass: &ForwardPass, delta_out: Array2<f64>) -> Vec<Array2<f64>> {
        let depth = self.weights.len();
        let mut grads = vec![Array2::zeros((0, 0)); depth];
        let mut delta = delta_out;
        for l in (0..depth).rev() {
            grads[l] = delta.t().dot(&pass.act[l]);
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l]);
                prev.zip_mut_with(&pass.pre[l - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = prev;
            }
        }
        grads
    }

    /// Mean loss and analytic gradient for a batch.
    pub fn gradient(&self, x: Array2<f64>, targets: &Targets) -> Result<(f64, Vec<Array2<f64>>)> {
        if x.nrows() == 0 {
            return Err(Error::Empty("gradient of an empty batch"));
        }
        let pass = self.forward_batch(x)?;
        let (loss, delta) = self.output_delta(&pass, targets)?;
        Ok((loss, self.backward(&pass, delta)))
    }

    /// Plain gradient step followed by the non-negativity projection.
    pub fn apply_update(&mut self, grads: &[Array2<f64>], learning_rate: f64, l2: f64) {
        for (w, g) in self.weights.iter_mut().zip(grads) {
            if l2 > 0.0 {
                w.zip_mut_with(g, |wv, &gv| *wv -= learning_rate * (gv + l2 * *wv));
            } else {
                w.scaled_add(-learning_rate, g);
            }
            if self.non_negative {
                w.mapv_inplace(|v| v.max(0.0));
            }
        }
    }

    /// Mini-batch gradient descent. Returns the trained model and the mean
    /// training loss of every epoch.
    pub fn train(mut self, data: &Dataset, cfg: &TrainConfig) -> Result<(AnnModel, Vec<f64>)> {
        cfg.validate()?;
        if data.input_dim() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), got: data.input_dim() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
                let x = batch_matrix(data, idx);
                let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
                let (loss, grads) = self.gradient(x, &Targets::Labels(&labels))?;
                if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Divergence { epoch, batch });
                }
                total += loss * idx.len() as f64;
                self.apply_update(&grads, cfg.learning_rate, cfg.l2);
            }
            curve.push(total / data.len().max(1) as f64);
        }
        Ok((self, curve))
    }

    /// Predicted classes for the whole dataset.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len());
        for chunk in idx.chunks(512) {
            let pass = self.forward_batch(batch_matrix(data, chunk))?;
            for row in pass.output().rows() {
                out.push(argmax(&row.to_vec()).0);
            }
        }
        Ok(out)
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("accuracy of an empty dataset"));
        }
        let pred = self.predict(data)?;
        let hits = pred.iter().enumerate().filter(|&(i, &p)| p == data.label(i)).count();
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>, provenance: Option<serde_json::Value>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file, provenance)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<serde_json::Value>)> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut reader)
    }

    /// One line of JSON header, then each weight matrix row-major as
    /// little-endian f32.
    pub fn write_to(&self, w: &mut dyn Write, provenance: Option<serde_json::Value>) -> Result<()> {
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            version: 1,
            layer_dims: self.layer_dims.clone(),
            output_head: self.output_head,
            loss: self.loss,
            non_negative: self.non_negative,
            provenance,
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for m in &self.weights {
            for &v in m.iter() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut dyn BufRead) -> Result<(Self, Option<serde_json::Value>)> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: ModelHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Format(format!("model header: {e}")))?;
        if header.format != MODEL_FORMAT {
            return Err(Error::Format(format!("unknown model format {:?}", header.format)));
        }
        let mut weights = Vec::new();
        for pair in header.layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut raw = vec![0u8; 4 * fan_in * fan_out];
            r.read_exact(&mut raw)
                .map_err(|_| Error::Consistency("model file truncated".into()))?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            weights.push(Array2::from_shape_vec((fan_out, fan_in), vals).expect("sized buffer"));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Consistency("trailing bytes after weight data".into()));
        }
        let model = Self::from_weights(weights, header.output_head, header.loss, header.non_negative)?;
        Ok((model, header.provenance))
    }

    /// Imports dense weight matrices stored as text, one file per projection,
    /// one output neuron per line, values separated by commas or whitespace.
    /// A leading extra column is accepted as a bias column if it is all zero.
    pub fn import_dense_text(
        paths: &[impl AsRef<Path>],
        output_head: OutputHead,
        loss: LossKind,
    ) -> Result<Self> {
        let mut weights = Vec::with_capacity(paths.len());
        for path in paths {
            let text = std::fs::read_to_string(path)?;
            let rows: Vec<Vec<f64>> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.split(|c: char| c == ',' || c.is_whitespace())
                        .filter(|t| !t.is_empty())
                        .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("{t:?}: {e}"))))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let cols = rows.first().map_or(0, |r| r.len());
            if rows.iter().any(|r| r.len() != cols) {
                return Err(Error::Format("ragged weight matrix".into()));
            }
            let mut m = Array2::from_shape_vec((rows.len(), cols), rows.concat()).expect("rectangular");
            let expected_in = weights.last().map(|w: &Array2<f64>| w.nrows());
            if expected_in.is_some_and(|n| cols == n + 1) {
                if m.column(0).iter().any(|&b| b != 0.0) {
                    return Err(Error::Config("imported weights carry non-zero biases".into()));
                }
                m = m.slice(s![.., 1..]).to_owned();
            }
            weights.push(m);
        }
        Self::from_weights(weights, output_head, loss, false)
    }

    /// Largest |w| over the whole network.
    pub fn max_abs_weight(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

const MODEL_FORMAT: &str = "snnbench-ann";

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    layer_dims: Vec<usize>,
    output_head: OutputHead,
    loss: LossKind,
    non_negative: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_layer_arithmetic() {
        let m = AnnModel::from_weights(vec![array![[1.0, -1.0]]], OutputHead::Relu, LossKind::Mse, false).unwrap();
        let acts = m.forward(&[3.0, 1.0]).unwrap();
        assert_eq!(acts[1], vec![2.0]);
    }

    #[test]
    fn zero_weights_give_zero_or_uniform_outputs() {
        let w = vec![Array2::zeros((4, 3)), Array2::zeros((10, 4))];
        let relu = AnnModel::from_weights(w.clone(), OutputHead::Relu, LossKind::Mse, false).unwrap();
        let acts = relu.forward(&[0.2, 0.4, 0.9]).unwrap();
        assert!(acts[1].iter().chain(&acts[2]).all(|&v| v == 0.0));
        let soft = AnnModel::from_weights(w, OutputHead::Softmax, LossKind::CrossEntropy, false).unwrap();
        let out = soft.forward(&[0.2, 0.4, 0.9]).unwrap().pop().unwrap();
        assert!(out.iter().all(|&p| (p - 0.1).abs() < 1e-12));
    }

    #[test]
    fn parameter_count_has_no_biases() {
        let m = AnnModel::new(&[89, 100, 10], OutputHead::Softmax, LossKind::CrossEntropy, false, 1).unwrap();
        assert_eq!(m.num_parameters(), 89 * 100 + 100 * 10);
    }

    #[test]
    fn wrong_input_length_is_a_shape_error() {
        let m = AnnModel::new(&[3, 2], OutputHead::Relu, LossKind::Mse, false, 1).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape { expected: 3, got: 1 })));
    }

    #[test]
    fn cross_entropy_requires_softmax() {
        assert!(AnnModel::new(&[3, 2], OutputHead::Relu, LossKind::CrossEntropy, false, 1).is_err());
    }

    #[test]
    fn zero_model_mse_zero_targets_has_zero_gradient() {
        let m = AnnModel::from_weights(
            vec![Array2::zeros((3, 2)), Array2::zeros((2, 3))],
            OutputHead::Relu,
            LossKind::Mse,
            false,
        )
        .unwrap();
        let x = array![[0.5, 0.1], [0.3, 0.9]];
        let t = Array2::zeros((2, 2));
        let (loss, grads) = m.gradient(x, &Targets::Dense(t.view())).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn hinge_touches_only_winner_and_runner_up() {
        let m = AnnModel::new(&[4, 6, 5], OutputHead::Relu, LossKind::HingeWinnerRunnerup, true, 3).unwrap();
        let x = array![[0.3, 0.8, 0.1, 0.5]];
        let pass = m.forward_batch(x.clone()).unwrap();
        let out = pass.output().row(0).to_vec();
        let y = 0;
        let runner = (1..5).fold(1, |b, c| if out[c] > out[b] { c } else { b });
        let (_, grads) = m.gradient(x, &Targets::Labels(&[y])).unwrap();
        for (c, row) in grads[1].rows().into_iter().enumerate() {
            if c != y && c != runner {
                assert!(row.iter().all(|&v| v == 0.0), "row {c} should be untouched");
            }
        }
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[3, 10, 2]), (1, false));
        assert_eq!(argmax(&[0, 0, 0]), (0, true));
        assert_eq!(argmax(&[1, 5, 5]), (1, true));
    }

    #[test]
    fn serialization_round_trip() {
        let m = AnnModel::new(&[5, 4, 3], OutputHead::Softmax, LossKind::CrossEntropy, false, 9).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf, Some(serde_json::json!({"device_seed": 4}))).unwrap();
        let (back, prov) = AnnModel::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.layer_dims(), m.layer_dims());
        assert_eq!(prov.unwrap()["device_seed"], 4);
        for (a, b) in back.weights().iter().zip(m.weights()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn truncated_model_file() {
        let m = AnnModel::new(&[5, 4, 3], OutputHead::Relu, LossKind::Mse, false, 9).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf, None).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(AnnModel::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn import_text_with_zero_bias_column() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("w1.csv");
        let b = dir.path().join("w2.csv");
        std::fs::write(&a, "0.1,0.2\n0.3,0.4\n0.5,0.6\n").unwrap();
        std::fs::write(&b, "0 1 2 3\n0 4 5 6\n").unwrap();
        let m = AnnModel::import_dense_text(&[a, b], OutputHead::Relu, LossKind::Mse).unwrap();
        assert_eq!(m.layer_dims(), &[2, 3, 2]);
        assert_eq!(m.weights()[1][[1, 2]], 6.0);
    }
}
