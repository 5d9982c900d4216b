use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use snnbench::ann::{AnnModel, LossKind, OutputHead, TrainConfig};
use snnbench::bench::{
    self, Builtin, CellConfig, DataStore, ExperimentSpec, NetworkSource, Prepared, RunResult, INIT_SEED,
};
use snnbench::converter::{decode_counts, encode, normalize_weights, ConversionConfig};
use snnbench::hil::{self, HilConfig};
use snnbench::hw_emulator::{DeviceInstance, HardwareProfile};
use snnbench::nas::{self, NasConfig, TrainingEvaluator};
use snnbench::snn_sim::LifParams;

#[derive(Parser)]
#[command(name = "snnbench", version, about = "ANN-to-SNN conversion and neuromorphic device benchmarks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment or command configuration (JSON file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Device profile: preset name or profile JSON path.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Results directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Exit successfully even if some sweep cells failed.
    #[arg(long, global = true)]
    keep_going: bool,
    /// Directory holding the MNIST IDX files (optionally gzipped).
    #[arg(long, global = true, env = "MNIST_DIR", default_value = "data/mnist")]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a perceptron and store it in the model format.
    Train,
    /// Normalize a model's weights and check the input encoding round trip.
    Convert,
    /// Run one experiment cell.
    Run,
    /// Run an experiment over a 1-D or 2-D parameter grid.
    Sweep,
    /// Retrain a model against an emulated device.
    Hil,
    /// Architecture search.
    Nas,
    /// Merge results directories into one report.
    Report {
        /// Results directories or results.json files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Option<PathBuf>, default: Value) -> Result<T> {
    let v = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => default,
    };
    Ok(serde_json::from_value(v)?)
}

/// Writes the standard results layout for rows that are not benchmark cells.
fn write_rows(out: &Path, spec: &impl Serialize, columns: &[&str], rows: &[Vec<Value>]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    let text = |v: &Value| match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    };
    let mut w = csv::Writer::from_path(out.join("results.csv"))?;
    w.write_record(columns)?;
    for r in rows {
        w.write_record(r.iter().map(text))?;
    }
    w.flush()?;
    let objects: Vec<serde_json::Map<String, Value>> =
        rows.iter().map(|r| columns.iter().map(|c| c.to_string()).zip(r.iter().cloned()).collect()).collect();
    std::fs::write(out.join("results.json"), serde_json::to_string_pretty(&objects)? + "\n")?;

    let cells: Vec<Vec<String>> = std::iter::once(columns.iter().map(|c| c.to_string()).collect())
        .chain(rows.iter().map(|r| {
            r.iter()
                .map(|v| match v.as_f64() {
                    Some(f) if v.is_f64() => format!("{f:.4}"),
                    _ => text(v),
                })
                .collect()
        }))
        .collect();
    let widths: Vec<usize> = (0..columns.len()).map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut table = String::new();
    for r in &cells {
        let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        table.push_str(line.join("  ").trim_end());
        table.push('\n');
    }
    std::fs::write(out.join("table.txt"), table)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSpec {
    /// Builtin recipe; ignored when `dims` is given.
    #[serde(default = "default_builtin")]
    network: String,
    #[serde(default)]
    dims: Option<Vec<usize>>,
    #[serde(default)]
    head: Option<OutputHead>,
    #[serde(default)]
    loss: Option<LossKind>,
    #[serde(default)]
    non_negative: Option<bool>,
    #[serde(default)]
    train: TrainConfig,
}

fn default_builtin() -> String {
    "spikey".into()
}

fn train(c: &Common) -> Result<bool> {
    let mut spec: TrainSpec = read_config(&c.config, json!({}))?;
    if let Some(s) = c.seed {
        spec.train.rng_seed = s;
    }
    let model = match &spec.dims {
        Some(dims) => AnnModel::new(
            dims,
            spec.head.unwrap_or(OutputHead::Softmax),
            spec.loss.unwrap_or(LossKind::CrossEntropy),
            spec.non_negative.unwrap_or(false),
            INIT_SEED,
        )?,
        None => {
            let b = Builtin::find(&spec.network)?;
            let mut m = b.untrained()?;
            if let Some(nn) = spec.non_negative {
                m.non_negative = nn;
            }
            m
        }
    };
    let data = DataStore::new(&c.data_dir);
    let splits = data.for_input(model.input_dim())?;
    eprintln!("training {:?} for {} epochs", model.layer_dims(), spec.train.epochs);
    let (model, curve) = model.train(&splits.train, &spec.train)?;
    std::fs::create_dir_all(&c.out)?;
    model.save(c.out.join("model.ann"), Some(json!({ "train": spec.train })))?;
    let test = model.accuracy(&splits.test)? * 100.0;
    let eval = model.accuracy(&splits.eval)? * 100.0;
    let mut rows: Vec<Vec<Value>> =
        curve.iter().enumerate().map(|(e, l)| vec![json!("loss"), json!(e), json!(l)]).collect();
    rows.push(vec![json!("eval_accuracy"), Value::Null, json!(eval)]);
    rows.push(vec![json!("test_accuracy"), Value::Null, json!(test)]);
    write_rows(&c.out, &spec, &["metric", "epoch", "value"], &rows)?;
    eprintln!("test accuracy {test:.2}%");
    Ok(true)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvertSpec {
    network: NetworkSource,
    #[serde(default)]
    conversion: ConversionConfig,
    #[serde(default)]
    lif: LifParams,
    /// Leading training images used for the encode/decode round trip.
    #[serde(default = "default_roundtrip")]
    roundtrip_images: usize,
}

fn default_roundtrip() -> usize {
    5
}

fn convert(c: &Common) -> Result<bool> {
    let mut spec: ConvertSpec = read_config(&c.config, json!({ "network": { "kind": "builtin", "name": "spikey" } }))?;
    if let Some(p) = &c.profile {
        spec.conversion = HardwareProfile::resolve(p)?.effective_config(&spec.conversion)?;
    }
    if let Some(s) = c.seed {
        spec.conversion.seed = s;
    }
    let data = DataStore::new(&c.data_dir);
    let model = bench::resolve_network(&spec.network, &data)?;
    let weights = normalize_weights(&model, &spec.conversion)?;
    std::fs::create_dir_all(&c.out)?;
    let net = json!({
        "layers": model.layer_dims(),
        "lif": spec.lif,
        "dt": snnbench::converter::DT,
        "weights": weights.iter().map(|w| w.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    serde_json::to_writer(BufWriter::new(File::create(c.out.join("network.json"))?), &net)?;

    let splits = data.for_input(model.input_dim())?;
    let bound = 1000.0 / (spec.conversion.f_max * spec.conversion.t_present);
    let mut rows = Vec::new();
    for i in 0..spec.roundtrip_images.min(splits.train.len()) {
        let x = splits.train.image(i);
        let counts: Vec<u32> = encode(x, &spec.conversion).iter().map(|t| t.len() as u32).collect();
        let back = decode_counts(&counts, &spec.conversion);
        let err = x.iter().zip(&back).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        rows.push(vec![json!(i), json!(splits.train.label(i)), json!(err), json!(bound)]);
    }
    write_rows(&c.out, &spec, &["image", "label", "max_abs_error", "bound"], &rows)?;
    Ok(true)
}

fn experiment(c: &Common, require_sweep: bool) -> Result<bool> {
    let Some(path) = &c.config else { bail!("--config <experiment.json> is required") };
    let mut spec = ExperimentSpec::from_json(&std::fs::read_to_string(path)?)?;
    if let Some(p) = &c.profile {
        spec.platform = p.clone();
    }
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    if require_sweep && spec.sweep.is_empty() {
        bail!("the experiment has no sweep; use `run`");
    }
    if !require_sweep && !spec.sweep.is_empty() {
        bail!("the experiment sweeps {} parameter(s); use `sweep`", spec.sweep.len());
    }
    let data = DataStore::new(&c.data_dir);
    let results = bench::run_experiment(&spec, &data)?;
    bench::write_results_dir(&c.out, &serde_json::to_value(&spec)?, &results)?;
    print!("{}", bench::render_table(&results));
    report_errors(&results)
}

fn report_errors(results: &[RunResult]) -> Result<bool> {
    let failed: Vec<&RunResult> = results.iter().filter(|r| r.error.is_some()).collect();
    for r in &failed {
        eprintln!("cell {} failed: {}", r.cell, r.error.as_deref().unwrap_or(""));
    }
    Ok(failed.is_empty())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HilSpec {
    network: NetworkSource,
    #[serde(default = "default_analog")]
    platform: String,
    conversion: ConversionConfig,
    #[serde(default)]
    lif: LifParams,
    #[serde(default)]
    hil: HilConfig,
    #[serde(default)]
    device_seed: u64,
    /// Leading test samples for the before/after comparison.
    #[serde(default)]
    samples: Option<usize>,
}

fn default_analog() -> String {
    "spikey".into()
}

fn hil_cmd(c: &Common) -> Result<bool> {
    let Some(path) = &c.config else { bail!("--config <hil.json> is required") };
    let mut spec: HilSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if let Some(p) = &c.profile {
        spec.platform = p.clone();
    }
    if let Some(s) = c.seed {
        spec.device_seed = s;
    }
    let data = DataStore::new(&c.data_dir);
    let profile = HardwareProfile::resolve(&spec.platform)?;
    let exp = ExperimentSpec {
        name: String::new(),
        network: spec.network.clone(),
        platform: spec.platform.clone(),
        conversion: spec.conversion.clone(),
        lif: spec.lif,
        sweep: vec![],
        batch_size: None,
        repetitions: Some(1),
        samples: spec.samples,
        hil: None,
        seed: spec.device_seed,
    };
    let prep = Prepared::new(&exp, &data)?;
    let cell = CellConfig::base(&exp, profile.clone());
    let before = bench::run_cell(&prep, &cell)?;

    let mut dev = DeviceInstance::new(profile.clone(), spec.device_seed)?;
    let lif = profile.lif_or(&spec.lif);
    eprintln!("retraining on {} (device seed {})", profile.name, spec.device_seed);
    let outcome = hil::hil_train(&prep.model, &mut dev, &lif, &spec.conversion, &spec.hil, &prep.train)?;
    std::fs::create_dir_all(&c.out)?;
    outcome.model.save(c.out.join("model.ann"), Some(hil::provenance(&dev, &spec.hil)))?;
    outcome.write_trace_csv(&mut BufWriter::new(File::create(c.out.join("hil_trace.csv"))?))?;

    let retrained = Prepared { model: outcome.model.clone(), ..prep.clone() };
    let mut after = bench::run_cell(&retrained, &cell)?;
    after.ann_accuracy = before.ann_accuracy;
    after.conversion_loss = after.ann_accuracy - after.accuracy;
    let row = |platform: String, m| RunResult {
        network: prep.network.clone(),
        platform,
        cell: 0,
        params: BTreeMap::new(),
        metrics: Some(m),
        error: None,
    };
    let results = vec![row(profile.name.clone(), before), row(format!("{}+hil", profile.name), after)];
    bench::write_results_dir(&c.out, &serde_json::to_value(&spec)?, &results)?;
    print!("{}", bench::render_table(&results));
    Ok(true)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NasSpec {
    #[serde(default = "NasConfig::desk_scale")]
    nas: NasConfig,
    #[serde(default = "five_epochs")]
    train: TrainConfig,
}

fn five_epochs() -> TrainConfig {
    TrainConfig { epochs: 5, ..TrainConfig::default() }
}

fn nas_cmd(c: &Common) -> Result<bool> {
    let mut spec: NasSpec = read_config(&c.config, json!({}))?;
    if let Some(s) = c.seed {
        spec.nas.seed = s;
    }
    let data = DataStore::new(&c.data_dir);
    let splits = data.for_input(spec.nas.input_dim)?;
    let evaluator = TrainingEvaluator { train: &splits.train, eval: &splits.eval, cfg: spec.train.clone() };
    std::fs::create_dir_all(&c.out)?;
    let mut trace = BufWriter::new(File::create(c.out.join("trace.jsonl"))?);
    let mut sink = |r: &nas::TraceRecord| -> snnbench::Result<()> {
        use std::io::Write;
        writeln!(trace, "{}", serde_json::to_string(r)?)?;
        trace.flush()?;
        if r.slot == 0 {
            eprintln!("generation {}", r.generation);
        }
        Ok(())
    };
    let outcome = nas::evolve(&spec.nas, &evaluator, &mut sink)?;
    outcome.write_pareto_csv(&mut BufWriter::new(File::create(c.out.join("pareto.csv"))?))?;
    std::fs::write(c.out.join("best_genome.json"), serde_json::to_string_pretty(&outcome.best)? + "\n")?;
    let rows: Vec<Vec<Value>> = outcome
        .pareto
        .iter()
        .map(|p| {
            let dims: Vec<String> = p.dims.iter().map(|d| d.to_string()).collect();
            vec![json!(p.hash), json!(p.accuracy * 100.0), json!(p.neurons), json!(p.sequential), json!(dims.join("x"))]
        })
        .collect();
    write_rows(&c.out, &spec, &["hash", "eval_accuracy", "neurons", "sequential", "dims"], &rows)?;
    Ok(true)
}

fn report(c: &Common, inputs: &[PathBuf]) -> Result<bool> {
    let mut results = Vec::new();
    for p in inputs {
        results.extend(bench::read_results(p).with_context(|| format!("reading results from {}", p.display()))?);
    }
    let sources: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    bench::write_results_dir(&c.out, &json!({ "report": sources }), &results)?;
    print!("{}", bench::render_table(&results));
    report_errors(&results)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let outcome = match &cli.command {
        Command::Train => train(c),
        Command::Convert => convert(c),
        Command::Run => experiment(c, false),
        Command::Sweep => experiment(c, true),
        Command::Hil => hil_cmd(c),
        Command::Nas => nas_cmd(c),
        Command::Report { inputs } => report(c, inputs),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if c.keep_going => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
