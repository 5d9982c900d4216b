//! Retraining with device-recorded spike rates standing in for the forward
//! activations.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{AnnModel, ForwardPass, OutputHead, Targets};
use crate::converter::{convert, ConversionConfig};
use crate::error::{Error, Result};
use crate::hw_emulator::{DeviceInstance, InstancePlan};
use crate::mnist_data::Dataset;
use crate::snn_sim::LifParams;

/// Which layers take recorded rates instead of computed activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Substitution {
    #[default]
    AllLayers,
    OutputOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HilConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    /// Rate (Hz) mapped to activation 1. `None` uses the largest hidden rate
    /// of the first device run.
    #[serde(default)]
    pub rate_normalizer: Option<f64>,
    #[serde(default)]
    pub substitution: Substitution,
    #[serde(default)]
    pub seed: u64,
}

impl Default for HilConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            samples_per_epoch: 1000,
            batch_size: 50,
            rate_normalizer: None,
            substitution: Substitution::AllLayers,
            seed: 0,
        }
    }
}

impl HilConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "HIL needs a positive learning rate, samples_per_epoch and batch_size".into(),
            ));
        }
        if self.rate_normalizer.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("rate_normalizer must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HilEpoch {
    pub epoch: usize,
    /// Device accuracy on this epoch's samples, before the update.
    pub device_accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct HilOutcome {
    pub model: AnnModel,
    pub trace: Vec<HilEpoch>,
    /// Rate mapped to activation 1, per projection target layer.
    pub rate_normalizers: Vec<f64>,
}

impl HilOutcome {
    pub fn write_trace_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "epoch,device_accuracy,loss")?;
        for e in &self.trace {
            writeln!(w, "{},{},{}", e.epoch, e.device_accuracy, e.loss)?;
        }
        Ok(())
    }
}

/// Provenance header for a model retrained on `dev`.
pub fn provenance(dev: &DeviceInstance, hconf: &HilConfig) -> serde_json::Value {
    serde_json::json!({
        "hil": {
            "profile": dev.profile.name,
            "device_seed": dev.seed,
            "epochs": hconf.epochs,
            "seed": hconf.seed,
        }
    })
}

fn rates(model: &AnnModel, counts: &[&Vec<Vec<u32>>], layer: usize, t_present: f64) -> Array2<f64> {
    let hz = if t_present > 0.0 { 1000.0 / t_present } else { 0.0 };
    let n = model.layer_dims()[layer];
    Array2::from_shape_fn((counts.len(), n), |(i, j)| counts[i][layer][j] as f64 * hz)
}

/// Builds a forward pass whose activations are the recorded rates divided by
/// the layer's normalizer (`normalizers[l - 1]` for layer `l`). `counts` is
/// `[sample][layer][neuron]`.
pub fn substituted_pass(
    model: &AnnModel,
    x: Array2<f64>,
    counts: &[&Vec<Vec<u32>>],
    t_present: f64,
    normalizers: &[f64],
    substitution: Substitution,
) -> Result<ForwardPass> {
    let depth = model.weights().len();
    if normalizers.len() != depth {
        return Err(Error::Config(format!("{} rate normalizers for {depth} layers", normalizers.len())));
    }
    let recorded = |layer: usize| rates(model, counts, layer, t_present) / normalizers[layer - 1];
    let mut pass = model.forward_batch(x)?;
    let first = match substitution {
        Substitution::AllLayers => 1,
        Substitution::OutputOnly => depth,
    };
    for l in first..=depth {
        let a_prev = &pass.act[l - 1];
        let z = a_prev.dot(&model.weights()[l - 1].t());
        let rates = recorded(l);
        if l < depth {
            pass.pre[l - 1] = z;
            pass.act[l] = rates;
        } else {
            match model.output_head {
                OutputHead::Relu => {
                    pass.pre[l - 1] = z;
                    pass.act[l] = rates;
                }
                OutputHead::Softmax => {
                    pass.act[l] = model.apply_head(&rates);
                    pass.pre[l - 1] = rates;
                }
            }
        }
    }
    Ok(pass)
}

/// Retrains `model` against the behaviour of `dev`. Each epoch converts the
/// current weights, records all layers on a fresh sample of `train`, and
/// back-propagates the loss through the recorded activations.
pub fn hil_train(
    model: &AnnModel,
    dev: &mut DeviceInstance,
    lif: &LifParams,
    cconf: &ConversionConfig,
    hconf: &HilConfig,
    train: &Dataset,
) -> Result<HilOutcome> {
    hconf.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("HIL training data"));
    }
    let cfg = dev.profile.effective_config(cconf)?;
    let lif = dev.profile.lif_or(lif);
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(hconf.epochs);
    let mut normalizers = hconf.rate_normalizer.map(|v| vec![v; model.weights().len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(hconf.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let n = hconf.samples_per_epoch.min(train.len());

    for epoch in 0..hconf.epochs {
        order.shuffle(&mut rng);
        let idx = &order[..n];
        let batch = train.select(idx);
        let net = convert(&model, &lif, &cfg)?;
        let (classified, _, layers) = dev.run_planned(&net, &batch, &cfg, &InstancePlan::single(n), true)?;
        let layers = layers.expect("layer counts were requested");
        let norm = match &normalizers {
            Some(v) => v.clone(),
            None => {
                // hidden layers, or the output layer of a single projection
                let hidden = 1..(model.layer_dims().len() - 1).max(2);
                let hidden_max = layers
                    .iter()
                    .flat_map(|s| s[hidden.clone()].iter().flatten())
                    .copied()
                    .max()
                    .unwrap_or(0);
                if hidden_max == 0 {
                    return Err(Error::Config("no spikes recorded during HIL calibration".into()));
                }
                let v = vec![hidden_max as f64 * 1000.0 / cfg.t_present; model.weights().len()];
                normalizers = Some(v.clone());
                v
            }
        };
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in (0..n).collect::<Vec<_>>().chunks(hconf.batch_size).enumerate() {
            let x = Array2::from_shape_fn((chunk.len(), batch.input_dim()), |(i, j)| batch.image(chunk[i])[j] as f64);
            let labels: Vec<usize> = chunk.iter().map(|&i| batch.label(i)).collect();
            let counts: Vec<&Vec<Vec<u32>>> = chunk.iter().map(|&i| &layers[i]).collect();
            let pass = substituted_pass(&model, x, &counts, cfg.t_present, &norm, hconf.substitution)?;
            let (loss, delta) = model.output_delta(&pass, &Targets::Labels(&labels))?;
            let grads = model.backward(&pass, delta);
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { epoch, batch: b });
            }
            model.apply_update(&grads, hconf.learning_rate, 0.0);
            loss_sum += loss;
            batches += 1;
        }
        trace.push(HilEpoch {
            epoch,
            device_accuracy: classified.accuracy(&batch),
            loss: loss_sum / batches.max(1) as f64,
        });
    }
    Ok(HilOutcome { model, trace, rate_normalizers: normalizers.unwrap_or_default() })
}
