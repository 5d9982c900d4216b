//! Experiment specs, parameter sweeps over the config tree, per-cell metrics
//! and aligned result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ann::{AnnModel, LossKind, OutputHead, TrainConfig};
use crate::converter::{convert, ConversionConfig};
use crate::error::{Error, Result};
use crate::hil::{hil_train, HilConfig};
use crate::hw_emulator::{estimate_energy, DeviceInstance, HardwareProfile, InstancePlan};
use crate::mnist_data::{Dataset, MnistSplits, PoolSpec, EVAL_HOLDOUT};
use crate::nas::Genome;
use crate::snn_sim::LifParams;

/// A network with a fixed recipe that is trained on demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Builtin {
    pub name: &'static str,
    pub dims: &'static [usize],
    pub head: OutputHead,
    pub loss: LossKind,
    pub non_negative: bool,
}

pub const BUILTINS: &[Builtin] = &[
    Builtin {
        name: "spikey",
        dims: &[89, 100, 10],
        head: OutputHead::Relu,
        loss: LossKind::HingeWinnerRunnerup,
        non_negative: true,
    },
    Builtin {
        name: "spikey_softmax",
        dims: &[89, 100, 10],
        head: OutputHead::Softmax,
        loss: LossKind::CrossEntropy,
        non_negative: true,
    },
    Builtin { name: "nas63", dims: &[784, 63, 10], head: OutputHead::Softmax, loss: LossKind::CrossEntropy, non_negative: false },
    Builtin {
        name: "nas129",
        dims: &[784, 129, 10],
        head: OutputHead::Softmax,
        loss: LossKind::CrossEntropy,
        non_negative: false,
    },
];

/// Seed of the weight initialization of built-in and genome networks.
pub const INIT_SEED: u64 = 1;

impl Builtin {
    pub fn find(name: &str) -> Result<&'static Builtin> {
        BUILTINS
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Unresolved(format!("builtin network `{name}`")))
    }

    pub fn untrained(&self) -> Result<AnnModel> {
        AnnModel::new(self.dims, self.head, self.loss, self.non_negative, INIT_SEED)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSource {
    /// A model file in the ann serialization format.
    Model { path: PathBuf },
    /// A sequential genome (JSON) trained with `train`.
    Genome {
        path: PathBuf,
        #[serde(default)]
        train: Option<TrainConfig>,
    },
    Builtin {
        name: String,
        #[serde(default)]
        train: Option<TrainConfig>,
    },
}

impl NetworkSource {
    /// Short name used in reports.
    pub fn label(&self) -> String {
        match self {
            NetworkSource::Model { path } | NetworkSource::Genome { path, .. } => {
                path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
            }
            NetworkSource::Builtin { name, .. } => name.clone(),
        }
    }
}

/// MNIST splits, loaded lazily in both input encodings.
#[derive(Debug)]
pub struct DataStore {
    dir: PathBuf,
    full: OnceLock<MnistSplits>,
    pooled: OnceLock<MnistSplits>,
}

impl DataStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), full: OnceLock::new(), pooled: OnceLock::new() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn full(&self) -> Result<&MnistSplits> {
        if let Some(s) = self.full.get() {
            return Ok(s);
        }
        let s = MnistSplits::load(&self.dir, EVAL_HOLDOUT)?;
        Ok(self.full.get_or_init(|| s))
    }

    /// 3x3-pooled and pruned splits.
    pub fn pooled(&self) -> Result<&MnistSplits> {
        if let Some(s) = self.pooled.get() {
            return Ok(s);
        }
        let (s, _) = self.full()?.downscale(&PoolSpec::mnist_3x3())?;
        Ok(self.pooled.get_or_init(|| s))
    }

    /// The splits whose input dimension matches `input_dim`.
    pub fn for_input(&self, input_dim: usize) -> Result<&MnistSplits> {
        let pooled = self.pooled()?;
        if pooled.train.input_dim() == input_dim {
            return Ok(pooled);
        }
        let full = self.full()?;
        if full.train.input_dim() == input_dim {
            return Ok(full);
        }
        Err(Error::Shape { expected: pooled.train.input_dim(), got: input_dim })
    }
}

/// Loads or trains the network a source refers to.
pub fn resolve_network(source: &NetworkSource, data: &DataStore) -> Result<AnnModel> {
    match source {
        NetworkSource::Model { path } => {
            if !path.exists() {
                return Err(Error::Unresolved(format!("model file {}", path.display())));
            }
            Ok(AnnModel::load(path)?.0)
        }
        NetworkSource::Genome { path, train } => {
            let text = std::fs::read_to_string(path)
                .map_err(|_| Error::Unresolved(format!("genome file {}", path.display())))?;
            let genome: Genome = serde_json::from_str(&text)?;
            let dims = genome
                .layer_dims()
                .ok_or_else(|| Error::Config("only sequential genomes can be benchmarked".into()))?;
            let model = AnnModel::new(&dims, OutputHead::Softmax, LossKind::CrossEntropy, false, INIT_SEED)?;
            let splits = data.for_input(dims[0])?;
            Ok(model.train(&splits.train, &train.clone().unwrap_or_default())?.0)
        }
        NetworkSource::Builtin { name, train } => {
            let b = Builtin::find(name)?;
            let splits = data.for_input(b.dims[0])?;
            Ok(b.untrained()?.train(&splits.train, &train.clone().unwrap_or_default())?.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    /// Dotted path into the cell config, e.g. `conversion.f_max`.
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub network: NetworkSource,
    /// Profile preset name or path to a profile JSON.
    #[serde(default = "default_platform")]
    pub platform: String,
    #[serde(default)]
    pub conversion: ConversionConfig,
    #[serde(default)]
    pub lif: LifParams,
    #[serde(default)]
    pub sweep: Vec<SweepAxis>,
    /// Samples per instance; defaults to all samples on one instance.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Defaults to 1 on deterministic profiles and 5 on noisy ones.
    #[serde(default)]
    pub repetitions: Option<usize>,
    /// Leading test samples to classify; defaults to the whole test split.
    #[serde(default)]
    pub samples: Option<usize>,
    /// Retrain on each device before measuring.
    #[serde(default)]
    pub hil: Option<HilConfig>,
    #[serde(default)]
    pub seed: u64,
}

fn default_platform() -> String {
    "ideal".into()
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.len() > 2 {
            return Err(Error::Config(format!("at most 2 swept parameters, got {}", self.sweep.len())));
        }
        if let Some(axis) = self.sweep.iter().find(|a| a.values.is_empty()) {
            return Err(Error::Config(format!("sweep over `{}` has no values", axis.path)));
        }
        if self.repetitions == Some(0) || self.batch_size == Some(0) {
            return Err(Error::Config("repetitions and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// The sweep grid, first axis outermost. An empty sweep is one cell.
    pub fn grid(&self) -> Vec<Vec<(String, Value)>> {
        let mut cells: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for axis in &self.sweep {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    axis.values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((axis.path.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

/// Everything a sweep path can address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub conversion: ConversionConfig,
    pub lif: LifParams,
    pub profile: HardwareProfile,
    pub batch_size: Option<usize>,
    pub repetitions: Option<usize>,
    pub samples: Option<usize>,
    pub hil: Option<HilConfig>,
    pub seed: u64,
}

impl CellConfig {
    pub fn base(spec: &ExperimentSpec, profile: HardwareProfile) -> Self {
        Self {
            conversion: spec.conversion.clone(),
            lif: spec.lif,
            profile,
            batch_size: spec.batch_size,
            repetitions: spec.repetitions,
            samples: spec.samples,
            hil: spec.hil.clone(),
            seed: spec.seed,
        }
    }

    /// Applies `path = value` overrides through the JSON form of the config.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (path, v) in overrides {
            set_path(&mut tree, path, v.clone())?;
        }
        let cell: Self = serde_json::from_value(tree)?;
        cell.conversion.validate()?;
        cell.profile.validate()?;
        Ok(cell)
    }

    pub fn repetitions(&self) -> usize {
        self.repetitions.unwrap_or(if self.profile.is_noisy() { 5 } else { 1 })
    }
}

/// Replaces the value at a dotted path. Every segment must already exist.
pub fn set_path(tree: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut node = tree;
    for seg in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(seg))
            .ok_or_else(|| Error::Unresolved(format!("config path `{path}`")))?;
    }
    *node = v;
    Ok(())
}

/// Parallel instances for a run; see [`InstancePlan::new`].
pub fn schedule(profile: &HardwareProfile, network_neurons: usize, n_samples: usize, batch_size: usize) -> Result<InstancePlan> {
    InstancePlan::new(profile, network_neurons, n_samples, batch_size)
}

/// Measurements of one cell, averaged over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent.
    pub accuracy: f64,
    pub accuracy_sd: f64,
    pub ann_accuracy: f64,
    /// `ann_accuracy - accuracy`, percentage points.
    pub conversion_loss: f64,
    pub wall_clock_ms: f64,
    pub energy_mj: f64,
    pub batch_size: usize,
    pub instances: usize,
    pub n_samples: usize,
    pub repetitions: usize,
    pub spikes_generated: f64,
    pub spikes_delivered: f64,
    pub spikes_dropped: f64,
    pub presynaptic_events: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub network: String,
    pub platform: String,
    pub cell: usize,
    pub params: BTreeMap<String, Value>,
    #[serde(default)]
    pub metrics: Option<Metrics>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Test data and network shared by every cell of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub network: String,
    pub model: AnnModel,
    pub train: Dataset,
    pub test: Dataset,
}

impl Prepared {
    pub fn new(spec: &ExperimentSpec, data: &DataStore) -> Result<Self> {
        let model = resolve_network(&spec.network, data)?;
        let splits = data.for_input(model.input_dim())?;
        let label = if spec.name.is_empty() { spec.network.label() } else { spec.name.clone() };
        Ok(Self { network: label, model, train: splits.train.clone(), test: splits.test.clone() })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Converts, schedules, runs and measures one cell.
pub fn run_cell(prep: &Prepared, cell: &CellConfig) -> Result<Metrics> {
    let test = match cell.samples {
        Some(n) => prep.test.head(n),
        None => prep.test.clone(),
    };
    if test.is_empty() {
        return Err(Error::Empty("test samples"));
    }
    let n = test.len();
    let batch = cell.batch_size.unwrap_or(n).min(n);
    let reps = cell.repetitions();
    let lif = cell.profile.lif_or(&cell.lif);
    let ccfg = cell.profile.effective_config(&cell.conversion)?;
    let ann_accuracy = prep.model.accuracy(&test)? * 100.0;

    let mut acc = Vec::with_capacity(reps);
    let (mut wall, mut energy, mut generated, mut delivered, mut dropped, mut events) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut instances = 0;
    for rep in 0..reps {
        let seed = cell.seed.wrapping_add(rep as u64);
        let mut dev = DeviceInstance::new(cell.profile.clone(), seed)?;
        let model = match &cell.hil {
            Some(h) => {
                let h = HilConfig { seed: h.seed.wrapping_add(rep as u64), ..h.clone() };
                hil_train(&prep.model, &mut dev, &lif, &ccfg, &h, &prep.train)?.model
            }
            None => prep.model.clone(),
        };
        let net = convert(&model, &lif, &ccfg)?;
        let plan = schedule(&cell.profile, net.num_neurons(), n, batch)?;
        let (classified, stats, _) = dev.run_planned(&net, &test, &ccfg, &plan, false)?;
        instances = plan.instances;
        acc.push(classified.accuracy(&test) * 100.0);
        wall.push(stats.wall_clock_ms);
        energy.push(estimate_energy(&stats, &cell.profile)? * 1000.0);
        generated.push(stats.generated.iter().sum::<u64>() as f64);
        delivered.push(stats.delivered.iter().sum::<u64>() as f64);
        dropped.push(stats.dropped.iter().sum::<u64>() as f64);
        events.push(stats.presynaptic_events as f64);
    }
    let accuracy = mean(&acc);
    Ok(Metrics {
        accuracy,
        accuracy_sd: sample_sd(&acc),
        ann_accuracy,
        conversion_loss: ann_accuracy - accuracy,
        wall_clock_ms: mean(&wall),
        energy_mj: mean(&energy),
        batch_size: batch,
        instances,
        n_samples: n,
        repetitions: reps,
        spikes_generated: mean(&generated),
        spikes_delivered: mean(&delivered),
        spikes_dropped: mean(&dropped),
        presynaptic_events: mean(&events),
    })
}

/// Runs every cell of the grid. Cell failures are recorded in the result
/// rather than aborting the grid; unresolvable network or profile references
/// fail the whole experiment.
pub fn run_experiment(spec: &ExperimentSpec, data: &DataStore) -> Result<Vec<RunResult>> {
    spec.validate()?;
    let profile = HardwareProfile::resolve(&spec.platform)?;
    let prep = Prepared::new(spec, data)?;
    Ok(run_grid(spec, &prep, &profile))
}

/// As [`run_experiment`] with the network already prepared.
pub fn run_grid(spec: &ExperimentSpec, prep: &Prepared, profile: &HardwareProfile) -> Vec<RunResult> {
    let base = CellConfig::base(spec, profile.clone());
    let platform = if spec.hil.is_some() { format!("{}+hil", profile.name) } else { profile.name.clone() };
    spec.grid()
        .into_par_iter()
        .enumerate()
        .map(|(i, overrides)| {
            let outcome = base.with_overrides(&overrides).and_then(|cell| run_cell(prep, &cell));
            let (metrics, error) = match outcome {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            RunResult {
                network: prep.network.clone(),
                platform: platform.clone(),
                cell: i,
                params: overrides.into_iter().collect(),
                metrics,
                error,
            }
        })
        .collect()
}

fn param_string(params: &BTreeMap<String, Value>) -> String {
    params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

pub const CSV_HEADER: [&str; 19] = [
    "network",
    "platform",
    "cell",
    "params",
    "repetitions",
    "accuracy",
    "accuracy_sd",
    "ann_accuracy",
    "conversion_loss",
    "wall_clock_ms",
    "energy_mj",
    "batch_size",
    "instances",
    "n_samples",
    "spikes_generated",
    "spikes_delivered",
    "spikes_dropped",
    "presynaptic_events",
    "error",
];

pub fn write_csv(results: &[RunResult], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(CSV_HEADER).map_err(io)?;
    for r in results {
        let mut row = vec![r.network.clone(), r.platform.clone(), r.cell.to_string(), param_string(&r.params)];
        match &r.metrics {
            Some(m) => row.extend([
                m.repetitions.to_string(),
                m.accuracy.to_string(),
                m.accuracy_sd.to_string(),
                m.ann_accuracy.to_string(),
                m.conversion_loss.to_string(),
                m.wall_clock_ms.to_string(),
                m.energy_mj.to_string(),
                m.batch_size.to_string(),
                m.instances.to_string(),
                m.n_samples.to_string(),
                m.spikes_generated.to_string(),
                m.spikes_delivered.to_string(),
                m.spikes_dropped.to_string(),
                m.presynaptic_events.to_string(),
            ]),
            None => row.extend(std::iter::repeat_n(String::new(), 14)),
        }
        row.push(r.error.clone().unwrap_or_default());
        out.write_record(&row).map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

/// Which of accuracy, loss, wall clock and energy are the best value within
/// the row's network. Equal values are all marked.
pub fn best_marks(results: &[RunResult]) -> Vec<[bool; 4]> {
    let key = |m: &Metrics| [-m.accuracy, m.conversion_loss, m.wall_clock_ms, m.energy_mj];
    let mut best: BTreeMap<&str, [f64; 4]> = BTreeMap::new();
    for r in results {
        if let Some(m) = &r.metrics {
            let k = key(m);
            let e = best.entry(&r.network).or_insert(k);
            for i in 0..4 {
                e[i] = e[i].min(k[i]);
            }
        }
    }
    results
        .iter()
        .map(|r| match &r.metrics {
            Some(m) => {
                let k = key(m);
                let b = best[r.network.as_str()];
                std::array::from_fn(|i| k[i] == b[i])
            }
            None => [false; 4],
        })
        .collect()
}

/// Aligned text table; best values per network carry a `*`.
pub fn render_table(results: &[RunResult]) -> String {
    let marks = best_marks(results);
    let header = ["network", "platform", "params", "accuracy %", "loss %", "wall clock ms", "energy mJ", "batch"];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (r, mk) in results.iter().zip(&marks) {
        let star = |b: bool| if b { "*" } else { "" };
        let mut row = vec![r.network.clone(), r.platform.clone(), param_string(&r.params)];
        match &r.metrics {
            Some(m) => {
                let acc = if m.repetitions > 1 {
                    format!("{:.2}±{:.2}", m.accuracy, m.accuracy_sd)
                } else {
                    format!("{:.2}", m.accuracy)
                };
                row.extend([
                    format!("{acc}{}", star(mk[0])),
                    format!("{:.2}{}", m.conversion_loss, star(mk[1])),
                    format!("{:.1}{}", m.wall_clock_ms, star(mk[2])),
                    format!("{:.4}{}", m.energy_mj, star(mk[3])),
                    m.batch_size.to_string(),
                ]);
            }
            None => row.push(format!("error: {}", r.error.as_deref().unwrap_or(""))),
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter().filter(|r| c < 3 || r.len() == header.len()).map(|r| r[c].chars().count()).max().unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| {
                let pad = if row.len() == header.len() || c < 3 { w - v.chars().count() } else { 0 };
                if c >= 3 { format!("{}{v}", " ".repeat(pad)) } else { format!("{v}{}", " ".repeat(pad)) }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

/// Writes `spec.json`, `results.csv`, `results.json` and `table.txt`.
pub fn write_results_dir(dir: &Path, spec: &Value, results: &[RunResult]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    write_csv(results, std::fs::File::create(dir.join("results.csv"))?)?;
    std::fs::write(dir.join("results.json"), serde_json::to_string_pretty(results)? + "\n")?;
    std::fs::write(dir.join("table.txt"), render_table(results))?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let path = if path.is_dir() { path.join("results.json") } else { path.to_path_buf() };
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
