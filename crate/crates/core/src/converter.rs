//! Conversion of trained perceptrons into rate-coded spiking networks, the
//! pixel/rate encoding round trip, and spike-count classification.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{argmax, AnnModel};
use crate::error::{Error, Result};
use crate::mnist_data::Dataset;
use crate::snn_sim::{
    poisson_train, regular_train, steps_for, InputSchedule, LifParams, NeuronFactors, Simulator, SnnNetwork,
    SpikeRecord, SpikeTrain,
};

/// Simulation step of converted networks (ms).
pub const DT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// Evenly spaced spikes, first spike at t = 0.
    #[default]
    Regular,
    /// Seeded Poisson process at the same mean rate.
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionConfig {
    /// Largest synaptic weight after scaling (µS).
    pub w_max: f64,
    /// Input rate of a pixel with intensity 1 (Hz).
    pub f_max: f64,
    /// Presentation time per sample (ms).
    pub t_present: f64,
    /// Silence after each sample (ms).
    #[serde(default)]
    pub t_gap: f64,
    /// Number of equally spaced weight magnitudes, including zero.
    #[serde(default)]
    pub weight_levels: Option<u32>,
    #[serde(default)]
    pub encoding: Encoding,
    /// Reset membranes and conductances before every sample; when off, the
    /// gap is the only separation between samples.
    #[serde(default = "default_true")]
    pub reset_between_samples: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            w_max: 0.01,
            f_max: 60.0,
            t_present: 200.0,
            t_gap: 0.0,
            weight_levels: None,
            encoding: Encoding::Regular,
            reset_between_samples: true,
            seed: 0,
        }
    }
}

impl ConversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_max > 0.0) || !(self.f_max > 0.0) || !(self.t_present >= 0.0) || !(self.t_gap >= 0.0) {
            return Err(Error::Config(format!(
                "conversion needs w_max > 0, f_max > 0 and non-negative times: {self:?}"
            )));
        }
        if self.weight_levels.is_some_and(|l| l < 2) {
            return Err(Error::Config("weight_levels must be at least 2".into()));
        }
        Ok(())
    }

    /// Expected spikes of a pixel at full intensity.
    pub fn full_scale_count(&self) -> f64 {
        self.f_max * self.t_present / 1000.0
    }
}

/// Rounds `w` to the nearest of `levels` equally spaced magnitudes in
/// `[0, w_max]`, keeping its sign. Exact halves round away from zero.
pub fn quantize(w: f64, w_max: f64, levels: u32) -> f64 {
    let step = w_max / (levels - 1) as f64;
    let k = (w.abs() / step).round().min((levels - 1) as f64);
    w.signum() * k * step
}

/// Divides every weight by the largest magnitude in the whole network and
/// scales to `w_max`, then optionally quantizes. Returns `(post, pre)`
/// matrices.
pub fn normalize_weights(model: &AnnModel, cfg: &ConversionConfig) -> Result<Vec<Array2<f64>>> {
    cfg.validate()?;
    let max = model.max_abs_weight();
    if max == 0.0 {
        return Err(Error::DegenerateModel);
    }
    Ok(model
        .weights()
        .iter()
        .map(|w| {
            w.mapv(|v| {
                // v / max first, so the largest magnitude lands exactly on w_max
                let scaled = v / max * cfg.w_max;
                match cfg.weight_levels {
                    Some(levels) => quantize(scaled, cfg.w_max, levels),
                    None => scaled,
                }
            })
        })
        .collect())
}

/// Rate-codes an input vector: value `p` becomes a train at `p * f_max`.
pub fn encode(x: &[f32], cfg: &ConversionConfig) -> Vec<SpikeTrain> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    encode_with(x, cfg, &mut rng)
}

fn encode_with(x: &[f32], cfg: &ConversionConfig, rng: &mut ChaCha8Rng) -> Vec<SpikeTrain> {
    x.iter()
        .map(|&p| {
            let rate = p.clamp(0.0, 1.0) as f64 * cfg.f_max;
            match cfg.encoding {
                Encoding::Regular => regular_train(rate, cfg.t_present),
                Encoding::Poisson => poisson_train(rate, cfg.t_present, rng),
            }
        })
        .collect()
}

/// Spike counts back to values in `[0, 1]`.
pub fn decode_counts(counts: &[u32], cfg: &ConversionConfig) -> Vec<f64> {
    let full = cfg.full_scale_count();
    counts
        .iter()
        .map(|&c| if full > 0.0 { (c as f64 / full).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

/// Decodes one layer of a spike record.
pub fn decode(record: &SpikeRecord, layer: usize, cfg: &ConversionConfig) -> Vec<f64> {
    decode_counts(&record.counts[layer], cfg)
}

/// Network with normalized weights; every population shares `lif`.
pub fn convert(model: &AnnModel, lif: &LifParams, cfg: &ConversionConfig) -> Result<SnnNetwork> {
    let weights = normalize_weights(model, cfg)?;
    SnnNetwork::from_post_pre(&weights, *lif, DT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedBatch {
    pub predicted: Vec<usize>,
    /// Output spike counts in the presentation window, one row per sample.
    pub counts: Vec<Vec<u32>>,
    /// Samples whose maximum count was shared (resolved to the lowest class).
    pub ties: Vec<bool>,
    /// Samples without any output spike.
    pub no_spike: Vec<bool>,
}

impl ClassifiedBatch {
    pub fn from_counts(counts: Vec<Vec<u32>>) -> Self {
        let mut predicted = Vec::with_capacity(counts.len());
        let mut ties = Vec::with_capacity(counts.len());
        let mut no_spike = Vec::with_capacity(counts.len());
        for row in &counts {
            let (best, tie) = argmax(row);
            predicted.push(best);
            ties.push(tie);
            no_spike.push(row.iter().all(|&c| c == 0));
        }
        Self { predicted, counts, ties, no_spike }
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = self.predicted.iter().enumerate().filter(|&(i, &p)| p == data.label(i)).count();
        hits as f64 / self.len() as f64
    }

    /// `sample_id,true,predicted,count_0..count_k` rows.
    pub fn write_csv(&self, data: &Dataset, w: &mut dyn Write) -> std::io::Result<()> {
        let k = self.counts.first().map_or(0, Vec::len);
        write!(w, "sample_id,true,predicted")?;
        for c in 0..k {
            write!(w, ",count_{c}")?;
        }
        writeln!(w)?;
        for (i, (p, row)) in self.predicted.iter().zip(&self.counts).enumerate() {
            write!(w, "{i},{},{p}", data.label(i))?;
            for c in row {
                write!(w, ",{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Device-side effects applied while simulating a batch. The default is an
/// ideal run.
#[derive(Debug, Clone, Default)]
pub struct RunEffects {
    pub factors: Option<NeuronFactors>,
    pub membrane_noise_sigma: f64,
    /// Aggregate input rate (Hz) above which input spikes are thinned.
    pub input_bw_cap: Option<f64>,
    /// Per-neuron rate (Hz) above which output spikes are lost.
    pub neuron_rate_cap: Option<f64>,
    pub seed: u64,
}

/// Spike accounting of a simulated batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSpikes {
    /// Output-layer counts per sample.
    pub output_counts: Vec<Vec<u32>>,
    /// All-layer counts per sample (`[sample][layer][neuron]`), if requested.
    pub layer_counts: Option<Vec<Vec<Vec<u32>>>>,
    /// Spikes generated per layer, before any loss.
    pub generated: Vec<u64>,
    /// Spikes delivered per layer.
    pub delivered: Vec<u64>,
    /// Spikes lost per layer (input thinning or rate cap).
    pub dropped: Vec<u64>,
    /// Spikes entering a projection (each delivered spike of every layer but
    /// the last).
    pub presynaptic_events: u64,
    /// Spike arrivals at synapses (presynaptic spikes times fan-out).
    pub synaptic_events: u64,
    /// Simulated model time over all samples (ms).
    pub model_time_ms: f64,
}

impl BatchSpikes {
    fn merge(mut self, other: BatchSpikes) -> BatchSpikes {
        self.output_counts.extend(other.output_counts);
        match (&mut self.layer_counts, other.layer_counts) {
            (Some(a), Some(b)) => a.extend(b),
            (None, b) => self.layer_counts = b,
            _ => {}
        }
        let add = |a: &mut Vec<u64>, b: Vec<u64>| {
            if a.is_empty() {
                *a = b;
            } else {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        };
        add(&mut self.generated, other.generated);
        add(&mut self.delivered, other.delivered);
        add(&mut self.dropped, other.dropped);
        self.presynaptic_events += other.presynaptic_events;
        self.synaptic_events += other.synaptic_events;
        self.model_time_ms += other.model_time_ms;
        self
    }
}

fn sample_rng(seed: u64, sample: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(sample as u64 + 1));
    rng.set_stream(stream);
    rng
}

/// Simulates `data[range]` sequentially on one network instance. RNG streams
/// depend only on the global sample index.
pub fn simulate_range(
    net: &SnnNetwork,
    data: &Dataset,
    range: std::ops::Range<usize>,
    cfg: &ConversionConfig,
    effects: &RunEffects,
    record_layers: bool,
) -> Result<BatchSpikes> {
    cfg.validate()?;
    if data.input_dim() != net.layers()[0] {
        return Err(Error::Shape { expected: net.layers()[0], got: data.input_dim() });
    }
    let layers = net.layers().to_vec();
    let n_layers = layers.len();
    let present_steps = steps_for(cfg.t_present, net.dt());
    let total_steps = steps_for(cfg.t_present + cfg.t_gap, net.dt());
    let mut sim = Simulator::new(net, effects.factors.as_ref(), effects.membrane_noise_sigma, effects.seed)?;
    let budget = effects
        .neuron_rate_cap
        .map(|cap| (cap * cfg.t_present / 1000.0 + 1e-9).floor().max(0.0) as u32);
    sim.set_spike_budget(budget);
    let fan_out: Vec<u64> = (0..n_layers - 1).map(|l| layers[l + 1] as u64).collect();

    let mut out = BatchSpikes {
        layer_counts: record_layers.then(Vec::new),
        generated: vec![0; n_layers],
        delivered: vec![0; n_layers],
        dropped: vec![0; n_layers],
        ..Default::default()
    };
    for i in range {
        if cfg.reset_between_samples {
            sim.reset();
        }
        sim.reset_budget();
        let mut enc_rng = sample_rng(cfg.seed, i, 1);
        let trains = encode_with(data.image(i), cfg, &mut enc_rng);
        let mut schedule = InputSchedule::from_trains(&trains, net.dt(), cfg.t_present);
        let generated_in = schedule.total_spikes() as u64;
        if let Some(cap) = effects.input_bw_cap {
            let rate: f64 = data.image(i).iter().map(|&p| p as f64 * cfg.f_max).sum();
            if rate > cap {
                let keep = cap / rate;
                let mut thin_rng = sample_rng(effects.seed, i, 2);
                for step in &mut schedule.steps {
                    step.retain(|_| thin_rng.random_bool(keep));
                }
            }
        }
        let delivered_in = schedule.total_spikes() as u64;
        if effects.membrane_noise_sigma > 0.0 {
            sim.reseed_noise(effects.seed ^ (i as u64).wrapping_mul(0xd134_2543_de82_ef95));
        }
        let rec = sim.run(&schedule, total_steps, present_steps, &[])?;
        let run_totals = &rec.run_totals;
        out.generated[0] += generated_in;
        out.delivered[0] += delivered_in;
        out.dropped[0] += generated_in - delivered_in;
        for l in 1..n_layers {
            out.delivered[l] += run_totals[l];
            out.dropped[l] += rec.dropped[l];
            out.generated[l] += run_totals[l] + rec.dropped[l];
        }
        for l in 0..n_layers - 1 {
            let spikes = if l == 0 { delivered_in } else { run_totals[l] };
            out.presynaptic_events += spikes;
            out.synaptic_events += spikes * fan_out[l];
        }
        out.model_time_ms += total_steps as f64 * net.dt();
        out.output_counts.push(rec.counts[n_layers - 1].clone());
        if let Some(lc) = &mut out.layer_counts {
            lc.push(rec.counts);
        }
    }
    Ok(out)
}

/// Splits `n` samples into contiguous chunks of at most `chunk` items.
pub fn partition(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk)).map(|k| k * chunk..((k + 1) * chunk).min(n)).collect()
}

/// Simulates the dataset split into independent instances, run in parallel
/// and merged in order.
pub fn simulate_partitioned(
    net: &SnnNetwork,
    data: &Dataset,
    cfg: &ConversionConfig,
    effects: &RunEffects,
    record_layers: bool,
    ranges: &[std::ops::Range<usize>],
) -> Result<BatchSpikes> {
    let parts: Vec<BatchSpikes> = ranges
        .par_iter()
        .map(|r| simulate_range(net, data, r.clone(), cfg, effects, record_layers))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().fold(BatchSpikes::default(), BatchSpikes::merge))
}

/// Classifies every sample by its output spike counts on an ideal simulator.
pub fn classify(net: &SnnNetwork, batch: &Dataset, cfg: &ConversionConfig) -> Result<ClassifiedBatch> {
    let ranges = if cfg.reset_between_samples {
        partition(batch.len(), 250)
    } else {
        vec![0..batch.len()]
    };
    let spikes = simulate_partitioned(net, batch, cfg, &RunEffects::default(), false, &ranges)?;
    Ok(ClassifiedBatch::from_counts(spikes.output_counts))
}
