//! Clock-driven simulation of layered networks of leaky integrate-and-fire
//! neurons with conductance-based, exponentially decaying synapses.
//!
//! Per step and layer: incoming spikes are added to the conductances, the
//! membrane is advanced with an exponential-Euler step using the step-averaged
//! conductances, the conductances decay, and neurons at or above threshold
//! spike and are clamped to `v_reset` for the refractory period. Spikes reach
//! the next layer within the same step.
//!
//! The threshold crossing is located inside the step by linear interpolation;
//! the refractory period runs from that instant, and a neuron leaving it
//! mid-step integrates the rest of the step from `v_reset`.

use std::io::Write;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// nF
    pub cm: f64,
    /// ms
    pub tau_m: f64,
    pub tau_syn_e: f64,
    pub tau_syn_i: f64,
    /// mV
    pub v_rest: f64,
    pub v_reset: f64,
    pub v_thresh: f64,
    pub e_rev_e: f64,
    pub e_rev_i: f64,
    /// ms
    pub t_refrac: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            cm: 0.2,
            tau_m: 20.0,
            tau_syn_e: 5.0,
            tau_syn_i: 5.0,
            v_rest: -65.0,
            v_reset: -65.0,
            v_thresh: -50.0,
            e_rev_e: 0.0,
            e_rev_i: -90.0,
            t_refrac: 1.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cm > 0.0
            && self.tau_m > 0.0
            && self.tau_syn_e > 0.0
            && self.tau_syn_i > 0.0
            && self.v_thresh > self.v_reset
            && self.e_rev_e > self.v_thresh
            && self.e_rev_i <= self.v_rest
            && self.t_refrac >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent LIF parameters {self:?}")))
        }
    }
}

/// Layered feed-forward spiking network. Layer 0 is a population of spike
/// sources; every other layer holds LIF neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct SnnNetwork {
    layers: Vec<usize>,
    /// `(pre, post)` conductance matrices in µS; the sign selects the
    /// excitatory (> 0) or inhibitory (< 0) channel.
    weights: Vec<Array2<f64>>,
    /// Parameters of layers `1..`.
    lif: Vec<LifParams>,
    dt: f64,
}

impl SnnNetwork {
    /// Builds a network from `(post, pre)` matrices, the orientation used by
    /// the perceptron models.
    pub fn from_post_pre(weights: &[Array2<f64>], lif: LifParams, dt: f64) -> Result<Self> {
        let projections: Vec<Array2<f64>> = weights.iter().map(|w| w.t().to_owned()).collect();
        let lif = vec![lif; projections.len()];
        Self::new(projections, lif, dt)
    }

    pub fn new(weights: Vec<Array2<f64>>, lif: Vec<LifParams>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if weights.is_empty() || lif.len() != weights.len() {
            return Err(Error::Config("one LIF parameter set per projection required".into()));
        }
        let mut layers = vec![weights[0].nrows()];
        for w in &weights {
            let prev = *layers.last().unwrap();
            if w.nrows() != prev {
                return Err(Error::Shape { expected: prev, got: w.nrows() });
            }
            layers.push(w.ncols());
        }
        for p in &lif {
            p.validate()?;
        }
        if weights.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config("non-finite synaptic weight".into()));
        }
        Ok(Self { layers, weights, lif, dt })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// `(pre, post)` matrix of projection `l` (layer `l` to `l + 1`).
    pub fn projection(&self, l: usize) -> &Array2<f64> {
        &self.weights[l]
    }

    pub fn projections(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn lif(&self, layer: usize) -> &LifParams {
        &self.lif[layer - 1]
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn num_neurons(&self) -> usize {
        self.layers.iter().sum()
    }

    pub fn with_lif(mut self, lif: LifParams) -> Result<Self> {
        lif.validate()?;
        self.lif = vec![lif; self.weights.len()];
        Ok(self)
    }
}

/// Spike times in ms for one source.
pub type SpikeTrain = Vec<f64>;

/// Input spikes binned to simulation steps: `steps[t]` lists the source
/// indices firing in step `t` (repeated for multiple spikes).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InputSchedule {
    pub steps: Vec<Vec<u32>>,
}

impl InputSchedule {
    pub fn from_trains(trains: &[SpikeTrain], dt: f64, duration: f64) -> Self {
        let n_steps = steps_for(duration, dt);
        let mut steps = vec![Vec::new(); n_steps];
        for (i, train) in trains.iter().enumerate() {
            for &t in train {
                let s = (t / dt + 1e-9).floor();
                if s >= 0.0 && (s as usize) < n_steps {
                    steps[s as usize].push(i as u32);
                }
            }
        }
        Self { steps }
    }

    pub fn total_spikes(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }
}

/// Number of whole steps covering `duration` ms.
pub fn steps_for(duration: f64, dt: f64) -> usize {
    (duration / dt + 1e-9).floor().max(0.0) as usize
}

/// Per-neuron deviations from the nominal parameters, used by device
/// emulation. Factors multiply `tau_m` and the threshold distance
/// `v_thresh - v_rest`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeuronFactors {
    /// Indexed `[layer - 1][neuron]`.
    pub tau_m: Vec<Vec<f64>>,
    pub threshold: Vec<Vec<f64>>,
}

/// Spikes of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpikeRecord {
    /// `[layer][neuron]` ordered spike times (ms), empty for unrecorded layers.
    pub times: Vec<Vec<Vec<f64>>>,
    /// `[layer][neuron]` spike counts.
    pub counts: Vec<Vec<u32>>,
    /// Spikes suppressed by the per-neuron budget, per layer.
    pub dropped: Vec<u64>,
    /// Spikes per layer over the whole run, including uncounted steps.
    #[serde(default)]
    pub run_totals: Vec<u64>,
    pub duration: f64,
}

impl SpikeRecord {
    pub fn layer_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|c| c.iter().map(|&v| v as u64).sum()).collect()
    }

    /// `neuron_id,time_ms` rows for one layer.
    pub fn write_csv(&self, layer: usize, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "neuron_id,time_ms")?;
        for (id, times) in self.times[layer].iter().enumerate() {
            for t in times {
                writeln!(w, "{id},{t}")?;
            }
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "duration_ms": self.duration,
            "layer_spike_counts": self.layer_totals(),
            "dropped": self.dropped,
        })
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    g_leak: Vec<f64>,
    v_thresh: Vec<f64>,
    cm: f64,
    v_rest: f64,
    v_reset: f64,
    e_rev_e: f64,
    e_rev_i: f64,
    decay_e: f64,
    decay_i: f64,
    /// Step-average of a unit conductance decaying over one step.
    mean_e: f64,
    mean_i: f64,
    t_refrac: f64,
}

/// Membrane potential, conductances and remaining refractory time (ms) of
/// one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub v: Vec<f64>,
    pub g_e: Vec<f64>,
    pub g_i: Vec<f64>,
    pub refrac: Vec<f64>,
    /// Offset of the latest spike inside its step (ms).
    pub spike_offset: Vec<f64>,
}

/// Reusable simulation engine for one network. Not shared between threads;
/// run independent instances concurrently instead.
pub struct Simulator<'a> {
    net: &'a SnnNetwork,
    params: Vec<LayerParams>,
    /// Split projections: excitatory and inhibitory magnitudes, `(pre, post)`.
    exc: Vec<Array2<f64>>,
    inh: Vec<Option<Array2<f64>>>,
    state: Vec<LayerState>,
    noise_sigma: f64,
    rng: ChaCha8Rng,
    budget: Option<u32>,
    emitted: Vec<Vec<u32>>,
    dropped: Vec<u64>,
}

impl<'a> Simulator<'a> {
    pub fn new(net: &'a SnnNetwork, factors: Option<&NeuronFactors>, noise_sigma: f64, seed: u64) -> Result<Self> {
        let dt = net.dt;
        let mut params = Vec::with_capacity(net.weights.len());
        for l in 1..net.layers.len() {
            let p = net.lif(l);
            let n = net.layers[l];
            let tau_f = factors.map(|f| f.tau_m[l - 1].as_slice());
            let th_f = factors.map(|f| f.threshold[l - 1].as_slice());
            if tau_f.is_some_and(|v| v.len() != n) || th_f.is_some_and(|v| v.len() != n) {
                return Err(Error::Shape { expected: n, got: tau_f.map_or(0, |v| v.len()) });
            }
            let g_leak = (0..n).map(|j| p.cm / (p.tau_m * tau_f.map_or(1.0, |v| v[j]))).collect();
            let v_thresh = (0..n)
                .map(|j| p.v_rest + (p.v_thresh - p.v_rest) * th_f.map_or(1.0, |v| v[j]))
                .collect();
            let mean = |tau: f64| tau / dt * (1.0 - (-dt / tau).exp());
            params.push(LayerParams {
                g_leak,
                v_thresh,
                cm: p.cm,
                v_rest: p.v_rest,
                v_reset: p.v_reset,
                e_rev_e: p.e_rev_e,
                e_rev_i: p.e_rev_i,
                decay_e: (-dt / p.tau_syn_e).exp(),
                decay_i: (-dt / p.tau_syn_i).exp(),
                mean_e: mean(p.tau_syn_e),
                mean_i: mean(p.tau_syn_i),
                t_refrac: p.t_refrac,
            });
        }
        let exc = net.weights.iter().map(|w| w.mapv(|v| v.max(0.0))).collect();
        let inh = net
            .weights
            .iter()
            .map(|w| w.iter().any(|&v| v < 0.0).then(|| w.mapv(|v| (-v).max(0.0))))
            .collect();
        let state = Self::rest_state(net);
        let emitted = net.layers.iter().map(|&n| vec![0; n]).collect();
        Ok(Self {
            net,
            params,
            exc,
            inh,
            state,
            noise_sigma,
            rng: ChaCha8Rng::seed_from_u64(seed),
            budget: None,
            emitted,
            dropped: vec![0; net.layers.len()],
        })
    }

    fn rest_state(net: &SnnNetwork) -> Vec<LayerState> {
        (1..net.layers.len())
            .map(|l| {
                let n = net.layers[l];
                LayerState {
                    v: vec![net.lif(l).v_rest; n],
                    g_e: vec![0.0; n],
                    g_i: vec![0.0; n],
                    refrac: vec![0.0; n],
                    spike_offset: vec![0.0; n],
                }
            })
            .collect()
    }

    /// Returns every LIF layer to rest with zero conductances.
    pub fn reset(&mut self) {
        self.state = Self::rest_state(self.net);
    }

    /// Per-neuron spike budget, counted from the last `reset_budget`.
    pub fn set_spike_budget(&mut self, budget: Option<u32>) {
        self.budget = budget;
    }

    pub fn reset_budget(&mut self) {
        for e in &mut self.emitted {
            e.iter_mut().for_each(|c| *c = 0);
        }
    }

    /// Restarts the membrane-noise stream.
    pub fn reseed_noise(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn state(&self, layer: usize) -> &LayerState {
        &self.state[layer - 1]
    }

    pub fn state_mut(&mut self, layer: usize) -> &mut LayerState {
        &mut self.state[layer - 1]
    }

    /// Advances one step. `input` lists firing sources (with multiplicity);
    /// `spiked[l]` receives the indices that fired in layer `l >= 1`.
    pub fn step(&mut self, input: &[u32], spiked: &mut [Vec<u32>]) -> Result<()> {
        let n_layers = self.net.layers.len();
        for l in 1..n_layers {
            let (before, after) = spiked.split_at_mut(l);
            let pre: &[u32] = if l == 1 { input } else { &before[l - 1] };
            let out = &mut after[0];
            out.clear();
            let p = &self.params[l - 1];
            let st = &mut self.state[l - 1];
            let exc = &self.exc[l - 1];
            for &i in pre {
                let row = exc.row(i as usize);
                for (g, &w) in st.g_e.iter_mut().zip(row.iter()) {
                    *g += w;
                }
            }
            if let Some(inh) = &self.inh[l - 1] {
                for &i in pre {
                    let row = inh.row(i as usize);
                    for (g, &w) in st.g_i.iter_mut().zip(row.iter()) {
                        *g += w;
                    }
                }
            }
            let dt = self.net.dt;
            for j in 0..st.v.len() {
                let ge = st.g_e[j] * p.mean_e;
                let gi = st.g_i[j] * p.mean_i;
                st.g_e[j] *= p.decay_e;
                st.g_i[j] *= p.decay_i;
                let mut start = 0.0;
                let mut v0 = st.v[j];
                if st.refrac[j] > 0.0 {
                    if st.refrac[j] >= dt - 1e-12 {
                        st.refrac[j] = (st.refrac[j] - dt).max(0.0);
                        st.v[j] = p.v_reset;
                        continue;
                    }
                    start = st.refrac[j];
                    st.refrac[j] = 0.0;
                    v0 = p.v_reset;
                }
                let span = dt - start;
                let g_tot = p.g_leak[j] + ge + gi;
                let v_inf = (p.g_leak[j] * p.v_rest + ge * p.e_rev_e + gi * p.e_rev_i) / g_tot;
                let mut v = v_inf + (v0 - v_inf) * (-span * g_tot / p.cm).exp();
                if self.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    v += self.noise_sigma * span.sqrt() * z;
                }
                if !v.is_finite() {
                    return Err(Error::Numerical { layer: l, neuron: j });
                }
                if v >= p.v_thresh[j] {
                    let frac = if v > v0 { ((p.v_thresh[j] - v0) / (v - v0)).clamp(0.0, 1.0) } else { 0.0 };
                    let crossing = start + frac * span;
                    st.spike_offset[j] = crossing;
                    st.refrac[j] = (p.t_refrac - (dt - crossing)).max(0.0);
                    v = p.v_reset;
                    let emitted = &mut self.emitted[l][j];
                    if self.budget.is_none_or(|b| *emitted < b) {
                        *emitted += 1;
                        out.push(j as u32);
                    } else {
                        self.dropped[l] += 1;
                    }
                }
                st.v[j] = v;
            }
        }
        Ok(())
    }

    /// Spikes suppressed by the budget since construction, per layer.
    pub fn dropped(&self) -> &[u64] {
        &self.dropped
    }

    /// Runs `schedule` for `n_steps` steps from the current state. Spike
    /// counts cover steps `< count_steps` only.
    pub fn run(
        &mut self,
        schedule: &InputSchedule,
        n_steps: usize,
        count_steps: usize,
        record_times: &[bool],
    ) -> Result<SpikeRecord> {
        let layers = &self.net.layers;
        let dt = self.net.dt;
        let mut record = SpikeRecord {
            times: layers
                .iter()
                .enumerate()
                .map(|(l, &n)| if record_times.get(l).copied().unwrap_or(false) { vec![Vec::new(); n] } else { Vec::new() })
                .collect(),
            counts: layers.iter().map(|&n| vec![0; n]).collect(),
            dropped: vec![0; layers.len()],
            run_totals: vec![0; layers.len()],
            duration: n_steps as f64 * dt,
        };
        let mut spiked: Vec<Vec<u32>> = vec![Vec::new(); layers.len()];
        let dropped_before = self.dropped.clone();
        let empty = Vec::new();
        for t in 0..n_steps {
            let input = schedule.steps.get(t).unwrap_or(&empty);
            self.step(input, &mut spiked)?;
            spiked[0].clear();
            spiked[0].extend_from_slice(input);
            let time = t as f64 * dt;
            for l in 0..layers.len() {
                record.run_totals[l] += spiked[l].len() as u64;
                if t < count_steps {
                    for &j in &spiked[l] {
                        record.counts[l][j as usize] += 1;
                    }
                }
                if !record.times[l].is_empty() {
                    for &j in &spiked[l] {
                        let ts = if l == 0 { time } else { time + self.state[l - 1].spike_offset[j as usize] };
                        record.times[l][j as usize].push(ts);
                    }
                }
            }
        }
        for (d, (now, before)) in record.dropped.iter_mut().zip(self.dropped.iter().zip(&dropped_before)) {
            *d = now - before;
        }
        Ok(record)
    }
}

/// Runs a network from rest on input spike trains for `duration` ms,
/// recording spike times for the flagged layers.
pub fn run(net: &SnnNetwork, inputs: &[SpikeTrain], duration: f64, record_times: &[bool]) -> Result<SpikeRecord> {
    if inputs.len() != net.layers[0] {
        return Err(Error::Shape { expected: net.layers[0], got: inputs.len() });
    }
    let schedule = InputSchedule::from_trains(inputs, net.dt, duration);
    let n_steps = steps_for(duration, net.dt);
    let mut sim = Simulator::new(net, None, 0.0, 0)?;
    sim.run(&schedule, n_steps, n_steps, record_times)
}

/// Regular spike train at `rate_hz` over `[0, duration)` ms, first spike at 0.
/// Holds `floor(rate * duration / 1000)` spikes.
pub fn regular_train(rate_hz: f64, duration: f64) -> SpikeTrain {
    if !(rate_hz > 0.0) || !(duration > 0.0) {
        return Vec::new();
    }
    let count = (rate_hz * duration / 1000.0 + 1e-9).floor() as usize;
    let isi = 1000.0 / rate_hz;
    (0..count).map(|k| k as f64 * isi).collect()
}

/// Poisson spike train at `rate_hz` over `[0, duration)` ms.
pub fn poisson_train(rate_hz: f64, duration: f64, rng: &mut impl rand::Rng) -> SpikeTrain {
    let mut out = Vec::new();
    if !(rate_hz > 0.0) {
        return out;
    }
    let exp = rand_distr::Exp::new(rate_hz / 1000.0).expect("positive rate");
    let mut t: f64 = exp.sample(rng);
    while t < duration {
        out.push(t);
        t += exp.sample(rng);
    }
    out
}
