//! Device profiles and emulated execution: weight resolution, frozen
//! mismatch, trial-to-trial variation, membrane noise, spike loss at
//! bandwidth limits, capacity, wall clock and energy.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::converter::{partition, simulate_partitioned, BatchSpikes, ClassifiedBatch, ConversionConfig, RunEffects};
use crate::error::{Error, Result};
use crate::mnist_data::Dataset;
use crate::snn_sim::{LifParams, NeuronFactors, SnnNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergyModel {
    /// Measured board power while active.
    Metered { active_power_w: f64 },
    /// Per presynaptic event energy plus static power.
    EventBased { joules_per_event: f64, idle_power_w: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    /// Weight resolution; `None` keeps full precision.
    #[serde(default)]
    pub weight_levels: Option<u32>,
    /// Coefficient of variation of the frozen per-neuron factors.
    #[serde(default)]
    pub mismatch_cv: f64,
    /// Coefficient of variation of the per-run re-jitter.
    #[serde(default)]
    pub trial_noise_cv: f64,
    /// Membrane noise in mV per sqrt(ms).
    #[serde(default)]
    pub membrane_noise_sigma: f64,
    /// Aggregate input rate (Hz) delivered without loss.
    #[serde(default)]
    pub input_bw_cap: Option<f64>,
    /// Output rate (Hz) per neuron delivered without loss.
    #[serde(default)]
    pub neuron_rate_cap: Option<f64>,
    /// Model time over wall-clock time.
    pub speedup: f64,
    /// Fixed wall-clock cost per batch (ms).
    #[serde(default)]
    pub batch_overhead_ms: f64,
    /// Neurons available on the device, including spike sources.
    #[serde(default)]
    pub capacity_neurons: Option<usize>,
    /// Whether neuron state can be reset between samples.
    #[serde(default = "default_true")]
    pub state_reset: bool,
    pub energy_model: EnergyModel,
    /// Neuron parameters prescribed by the device.
    #[serde(default)]
    pub lif: Option<LifParams>,
}

fn default_true() -> bool {
    true
}

const PRESETS: &[(&str, &str)] = &[
    ("ideal", include_str!("../presets/ideal.json")),
    ("spikey", include_str!("../presets/spikey.json")),
    ("brainscales", include_str!("../presets/brainscales.json")),
    ("spinn3", include_str!("../presets/spinn3.json")),
    ("spinn5", include_str!("../presets/spinn5.json")),
    ("nest", include_str!("../presets/nest.json")),
    ("genn_cpu", include_str!("../presets/genn_cpu.json")),
    ("genn_gpu", include_str!("../presets/genn_gpu.json")),
];

impl HardwareProfile {
    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Unresolved(format!("profile `{name}`")))?;
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    /// A preset name or a path to a profile JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if PRESETS.iter().any(|(n, _)| *n == name_or_path) {
            return Self::preset(name_or_path);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::Unresolved(format!("profile `{name_or_path}`")));
        }
        let p: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        p.validate()?;
        Ok(p)
    }

    /// Noise-free, unlimited device.
    pub fn ideal() -> Self {
        Self::preset("ideal").expect("bundled preset")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("profile `{}`: {m}", self.name)));
        if self.weight_levels.is_some_and(|l| l < 2) {
            return bad("weight_levels must be at least 2");
        }
        if !(self.speedup > 0.0) {
            return bad("speedup must be positive");
        }
        if [self.mismatch_cv, self.trial_noise_cv, self.membrane_noise_sigma, self.batch_overhead_ms]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("noise magnitudes and overhead must be non-negative");
        }
        if self.input_bw_cap.is_some_and(|c| !(c > 0.0)) || self.neuron_rate_cap.is_some_and(|c| !(c > 0.0)) {
            return bad("caps must be positive");
        }
        if self.capacity_neurons == Some(0) {
            return bad("capacity must be positive");
        }
        match self.energy_model {
            EnergyModel::Metered { active_power_w } if !(active_power_w >= 0.0) => bad("negative power"),
            EnergyModel::EventBased { joules_per_event, idle_power_w }
                if !(joules_per_event >= 0.0) || !(idle_power_w >= 0.0) =>
            {
                bad("negative energy constant")
            }
            _ => Ok(()),
        }
    }

    /// Conversion settings adjusted to the device: weight resolution and
    /// the ability to reset state.
    pub fn effective_config(&self, cfg: &ConversionConfig) -> Result<ConversionConfig> {
        let mut out = cfg.clone();
        match (cfg.weight_levels, self.weight_levels) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!(
                    "weight_levels {a} conflicts with profile `{}` ({b})",
                    self.name
                )))
            }
            (None, Some(b)) => out.weight_levels = Some(b),
            _ => {}
        }
        out.reset_between_samples = cfg.reset_between_samples && self.state_reset;
        Ok(out)
    }

    /// Whether runs on different device seeds can differ.
    pub fn is_noisy(&self) -> bool {
        self.mismatch_cv > 0.0 || self.trial_noise_cv > 0.0 || self.membrane_noise_sigma > 0.0 || self.input_bw_cap.is_some()
    }

    pub fn lif_or(&self, default: &LifParams) -> LifParams {
        self.lif.unwrap_or(*default)
    }
}

/// Parallel instances and their contiguous sample ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstancePlan {
    pub instances: usize,
    pub ranges: Vec<std::ops::Range<usize>>,
}

impl InstancePlan {
    /// `min(capacity / network, ceil(n / batch))` instances sharing the
    /// samples contiguously.
    pub fn new(profile: &HardwareProfile, network_neurons: usize, n_samples: usize, batch_size: usize) -> Result<Self> {
        let batch_size = batch_size.max(1);
        let wanted = n_samples.div_ceil(batch_size).max(1);
        let instances = match profile.capacity_neurons {
            Some(cap) if network_neurons > cap => {
                return Err(Error::Capacity { needed: network_neurons, available: cap })
            }
            Some(cap) => (cap / network_neurons.max(1)).min(wanted),
            None => wanted,
        };
        let ranges = partition(n_samples, n_samples.div_ceil(instances).max(1));
        Ok(Self { instances, ranges })
    }

    pub fn single(n_samples: usize) -> Self {
        Self { instances: 1, ranges: vec![0..n_samples] }
    }

    /// Samples processed by the busiest instance.
    pub fn max_share(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).max().unwrap_or(0)
    }
}

/// Accounting of one device run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub n_samples: usize,
    pub instances: usize,
    /// Simulated model time of the busiest instance (ms).
    pub model_time_ms: f64,
    pub wall_clock_ms: f64,
    pub presynaptic_events: u64,
    pub synaptic_events: u64,
    pub generated: Vec<u64>,
    pub delivered: Vec<u64>,
    pub dropped: Vec<u64>,
}

impl RunStats {
    fn from_spikes(spikes: &BatchSpikes, plan: &InstancePlan, cfg: &ConversionConfig, profile: &HardwareProfile) -> Self {
        let model_time_ms = plan.max_share() as f64 * (cfg.t_present + cfg.t_gap);
        Self {
            n_samples: spikes.output_counts.len(),
            instances: plan.instances,
            model_time_ms,
            wall_clock_ms: model_time_ms / profile.speedup + profile.batch_overhead_ms,
            presynaptic_events: spikes.presynaptic_events,
            synaptic_events: spikes.synaptic_events,
            generated: spikes.generated.clone(),
            delivered: spikes.delivered.clone(),
            dropped: spikes.dropped.clone(),
        }
    }
}

/// One emulated device: a profile plus frozen per-neuron deviations.
#[derive(Debug, Clone)]
pub struct DeviceInstance {
    pub profile: HardwareProfile,
    pub seed: u64,
    runs: u64,
}

fn lognormal_unit_mean(cv: f64) -> Option<LogNormal<f64>> {
    if cv <= 0.0 {
        return None;
    }
    let var = (1.0 + cv * cv).ln();
    Some(LogNormal::new(-var / 2.0, var.sqrt()).expect("finite parameters"))
}

/// `n` factors of one (layer, parameter) stream. The first `n` draws of a
/// stream never depend on other layer sizes.
fn factor_stream(seed: u64, stream: u64, n: usize, cv: f64) -> Vec<f64> {
    match lognormal_unit_mean(cv) {
        None => vec![1.0; n],
        Some(dist) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
    }
}

impl DeviceInstance {
    pub fn new(profile: HardwareProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        Ok(Self { profile, seed, runs: 0 })
    }

    /// Runs started so far.
    pub fn runs(&self) -> u64 {
        self.runs
    }

    /// Frozen mismatch for a network with the given layer sizes.
    pub fn mismatch(&self, layers: &[usize]) -> NeuronFactors {
        let cv = self.profile.mismatch_cv;
        let mut f = NeuronFactors::default();
        for (l, &n) in layers.iter().enumerate().skip(1) {
            f.tau_m.push(factor_stream(self.seed, 2 * l as u64, n, cv));
            f.threshold.push(factor_stream(self.seed, 2 * l as u64 + 1, n, cv));
        }
        f
    }

    /// Mismatch re-jittered for run number `run`.
    pub fn run_factors(&self, layers: &[usize], run: u64) -> NeuronFactors {
        let mut f = self.mismatch(layers);
        let cv = self.profile.trial_noise_cv;
        if cv > 0.0 {
            let run_seed = self.seed ^ (run + 1).wrapping_mul(0xa076_1d64_78bd_642f);
            for (l, (tau, th)) in f.tau_m.iter_mut().zip(&mut f.threshold).enumerate() {
                let jt = factor_stream(run_seed, 2 * (l as u64 + 1), tau.len(), cv);
                let jv = factor_stream(run_seed, 2 * (l as u64 + 1) + 1, th.len(), cv);
                tau.iter_mut().zip(jt).for_each(|(a, b)| *a *= b);
                th.iter_mut().zip(jv).for_each(|(a, b)| *a *= b);
            }
        }
        f
    }

    fn is_nominal(&self) -> bool {
        self.profile.mismatch_cv == 0.0 && self.profile.trial_noise_cv == 0.0
    }

    /// Checks that every weight lies on the profile's level grid.
    fn check_weights(&self, net: &SnnNetwork, cfg: &ConversionConfig) -> Result<()> {
        let Some(levels) = self.profile.weight_levels else { return Ok(()) };
        let step = cfg.w_max / (levels - 1) as f64;
        for w in net.projections() {
            for &v in w {
                let k = v.abs() / step;
                if (k - k.round()).abs() > 1e-6 || k.round() > (levels - 1) as f64 {
                    return Err(Error::Config(format!(
                        "weight {v} is not one of the {levels} levels of profile `{}`",
                        self.profile.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Classifies on a single instance.
    pub fn run(&mut self, net: &SnnNetwork, batch: &Dataset, cfg: &ConversionConfig) -> Result<(ClassifiedBatch, RunStats)> {
        let plan = InstancePlan::new(&self.profile, net.num_neurons(), batch.len(), batch.len())?;
        self.run_planned(net, batch, cfg, &plan, false).map(|(c, s, _)| (c, s))
    }

    /// Classifies with the given instance plan. With `record_layers`, the
    /// per-sample counts of every layer are returned as well.
    pub fn run_planned(
        &mut self,
        net: &SnnNetwork,
        batch: &Dataset,
        cfg: &ConversionConfig,
        plan: &InstancePlan,
        record_layers: bool,
    ) -> Result<(ClassifiedBatch, RunStats, Option<Vec<Vec<Vec<u32>>>>)> {
        if let Some(cap) = self.profile.capacity_neurons {
            if net.num_neurons() > cap {
                return Err(Error::Capacity { needed: net.num_neurons(), available: cap });
            }
        }
        let cfg = self.profile.effective_config(cfg)?;
        self.check_weights(net, &cfg)?;
        let run = self.runs;
        self.runs += 1;
        let effects = RunEffects {
            factors: (!self.is_nominal()).then(|| self.run_factors(net.layers(), run)),
            membrane_noise_sigma: self.profile.membrane_noise_sigma,
            input_bw_cap: self.profile.input_bw_cap,
            neuron_rate_cap: self.profile.neuron_rate_cap,
            seed: self.seed ^ (run + 1).wrapping_mul(0xe703_7ed1_a0b4_28db),
        };
        let ranges = if cfg.reset_between_samples || plan.ranges.len() > 1 {
            plan.ranges.clone()
        } else {
            vec![0..batch.len()]
        };
        let spikes = simulate_partitioned(net, batch, &cfg, &effects, record_layers, &ranges)?;
        let stats = RunStats::from_spikes(&spikes, plan, &cfg, &self.profile);
        let layers = spikes.layer_counts;
        Ok((ClassifiedBatch::from_counts(spikes.output_counts), stats, layers))
    }
}

/// Convenience wrapper over [`DeviceInstance::run`].
pub fn run_on_device(
    dev: &mut DeviceInstance,
    net: &SnnNetwork,
    batch: &Dataset,
    cfg: &ConversionConfig,
) -> Result<(ClassifiedBatch, RunStats)> {
    dev.run(net, batch, cfg)
}

/// Joules per inference.
pub fn estimate_energy(stats: &RunStats, profile: &HardwareProfile) -> Result<f64> {
    if stats.n_samples == 0 {
        return Err(Error::Empty("energy per inference of zero samples"));
    }
    let n = stats.n_samples as f64;
    let wall_s = stats.wall_clock_ms / 1000.0;
    Ok(match profile.energy_model {
        EnergyModel::Metered { active_power_w } => active_power_w * wall_s / n,
        EnergyModel::EventBased { joules_per_event, idle_power_w } => {
            stats.presynaptic_events as f64 * joules_per_event / n + idle_power_w * wall_s / n
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(n: usize, wall_ms: f64, events: u64) -> RunStats {
        RunStats {
            n_samples: n,
            instances: 1,
            model_time_ms: 0.0,
            wall_clock_ms: wall_ms,
            presynaptic_events: events,
            synaptic_events: 0,
            generated: vec![],
            delivered: vec![],
            dropped: vec![],
        }
    }

    #[test]
    fn presets_parse() {
        for name in HardwareProfile::preset_names() {
            let p = HardwareProfile::preset(name).unwrap();
            assert_eq!(p.name, name);
        }
        assert!(HardwareProfile::resolve("nonexistent").is_err());
    }

    #[test]
    fn metered_energy_arithmetic() {
        let mut p = HardwareProfile::ideal();
        p.energy_model = EnergyModel::Metered { active_power_w: 10.0 };
        let e = estimate_energy(&stats(5000, 5070.0, 0), &p).unwrap();
        assert!((e * 1e3 - 10.14).abs() < 1e-9);
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(estimate_energy(&stats(0, 1.0, 0), &HardwareProfile::ideal()).is_err());
    }

    #[test]
    fn event_energy_linear_in_events() {
        let mut p = HardwareProfile::ideal();
        p.energy_model = EnergyModel::EventBased { joules_per_event: 1e-9, idle_power_w: 0.0 };
        let a = estimate_energy(&stats(10, 1.0, 1000), &p).unwrap();
        let b = estimate_energy(&stats(10, 1.0, 3000), &p).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-18);
    }

    #[test]
    fn schedule_arithmetic() {
        let mut p = HardwareProfile::ideal();
        p.capacity_neurons = Some(1020);
        assert_eq!(InstancePlan::new(&p, 199, 10000, 100).unwrap().instances, 5);
        assert_eq!(InstancePlan::new(&p, 199, 10000, 10000).unwrap().instances, 1);
        assert!(matches!(InstancePlan::new(&p, 2000, 10, 1), Err(Error::Capacity { .. })));
        let plan = InstancePlan::new(&p, 199, 11, 2).unwrap();
        assert_eq!(plan.ranges, vec![0..3, 3..6, 6..9, 9..11]);
    }

    #[test]
    fn zero_mismatch_is_nominal() {
        let dev = DeviceInstance::new(HardwareProfile::ideal(), 3).unwrap();
        let f = dev.mismatch(&[4, 3, 2]);
        assert!(f.tau_m.iter().chain(&f.threshold).flatten().all(|&x| x == 1.0));
    }

    #[test]
    fn mismatch_is_frozen_per_seed() {
        let mut p = HardwareProfile::ideal();
        p.mismatch_cv = 0.2;
        let a = DeviceInstance::new(p.clone(), 7).unwrap().mismatch(&[5, 30, 10]);
        let b = DeviceInstance::new(p.clone(), 7).unwrap().mismatch(&[5, 30, 10]);
        let c = DeviceInstance::new(p, 8).unwrap().mismatch(&[5, 30, 10]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn conflicting_levels_rejected() {
        let p = HardwareProfile::preset("spikey").unwrap();
        let cfg = ConversionConfig { weight_levels: Some(8), ..Default::default() };
        assert!(p.effective_config(&cfg).is_err());
        let cfg = ConversionConfig::default();
        assert_eq!(p.effective_config(&cfg).unwrap().weight_levels, p.weight_levels);
    }
}
