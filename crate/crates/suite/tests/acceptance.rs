//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion (with
//! the individual checks indented below it) and exits non-zero if any
//! criterion fails. Tolerances are pinned in the constants next to each
//! criterion.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use snnbench::ann::{AnnModel, TrainConfig};
use snnbench::bench::{run_experiment, write_results_dir, Builtin, ExperimentSpec};
use snnbench::converter::{classify, convert, ClassifiedBatch, ConversionConfig};
use snnbench::hil::{hil_train, HilConfig};
use snnbench::hw_emulator::{estimate_energy, DeviceInstance, EnergyModel, HardwareProfile, InstancePlan, RunStats};
use snnbench::mnist_data::Dataset;
use snnbench::nas::{
    compare_fitness, evolve, ranked_draw, Element, Fitness, Genome, MetaGraph, NasConfig, NodeGene, TraceRecord,
    TrainingEvaluator, INPUT, OUTPUT,
};
use snnbench::snn_sim::{poisson_train, regular_train, run, InputSchedule, LifParams, Simulator, SnnNetwork};
use snnbench_suite::{builtin, full, pooled, spikey, workspace_root, Verdict};

fn pct(x: f64) -> f64 {
    x * 100.0
}

fn snn_accuracy(model: &AnnModel, lif: &LifParams, cfg: &ConversionConfig, data: &Dataset) -> f64 {
    let net = convert(model, lif, cfg).unwrap();
    pct(classify(&net, data, cfg).unwrap().accuracy(data))
}

fn ann_accuracy(model: &AnnModel, data: &Dataset) -> f64 {
    pct(model.accuracy(data).unwrap())
}

fn device_run(
    model: &AnnModel,
    profile: &HardwareProfile,
    seed: u64,
    cfg: &ConversionConfig,
    data: &Dataset,
) -> (ClassifiedBatch, RunStats) {
    let eff = profile.effective_config(cfg).unwrap();
    let net = convert(model, &profile.lif_or(&LifParams::default()), &eff).unwrap();
    let plan = InstancePlan::new(profile, net.num_neurons(), data.len(), data.len()).unwrap();
    let mut dev = DeviceInstance::new(profile.clone(), seed).unwrap();
    let (out, stats, _) = dev.run_planned(&net, data, cfg, &plan, false).unwrap();
    (out, stats)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// The 89x100x10 hinge network as presented to the Spikey-like device.
fn spikey_device_cfg() -> ConversionConfig {
    ConversionConfig { w_max: 0.006, f_max: 150.0, t_present: 200.0, t_gap: 50.0, ..Default::default() }
}

fn ideal_cfg(f_max: f64, w_max: f64) -> ConversionConfig {
    ConversionConfig { w_max, f_max, t_present: 200.0, ..Default::default() }
}

// 1 ------------------------------------------------------------------------

const ANN_TARGET: f64 = 90.13;
const ANN_TOL: f64 = 1.5;
const SMOKE_MIN: f64 = 85.0;
const ANN_BUDGET: Duration = Duration::from_secs(300);

fn criterion_1(v: &mut Verdict) {
    let test = &pooled().test;
    let t = Instant::now();
    let acc = ann_accuracy(spikey(), test);
    let took = t.elapsed();
    v.check(
        "89x100x10 test accuracy",
        (acc - ANN_TARGET).abs() <= ANN_TOL,
        format!("{acc:.2}% (target {ANN_TARGET} ± {ANN_TOL})"),
    );
    v.check("training time", took <= ANN_BUDGET, format!("{:.1} s (limit {} s)", took.as_secs_f64(), ANN_BUDGET.as_secs()));
    let smoke = Builtin::find("spikey")
        .unwrap()
        .untrained()
        .unwrap()
        .train(&pooled().train, &TrainConfig { epochs: 5, ..TrainConfig::default() })
        .unwrap()
        .0;
    let acc5 = ann_accuracy(&smoke, test);
    v.check("5-epoch smoke variant", acc5 >= SMOKE_MIN, format!("{acc5:.2}% (min {SMOKE_MIN})"));
}

// 2 ------------------------------------------------------------------------

const SPIKEY_LOSS_MAX: f64 = 1.5;
const NAS_ANN_MIN: f64 = 97.0;
const NAS_LOSS_MAX: f64 = 0.7;
const CONVERSION_SAMPLES: usize = 2000;

/// Best (lif, cfg) on the tuning data by SNN accuracy; first one wins ties.
fn tune(model: &AnnModel, grid: &[(LifParams, ConversionConfig)], tuning: &Dataset) -> (LifParams, ConversionConfig, f64) {
    let mut best: Option<(LifParams, ConversionConfig, f64)> = None;
    for (lif, cfg) in grid {
        let acc = snn_accuracy(model, lif, cfg, tuning);
        if best.as_ref().is_none_or(|b| acc > b.2) {
            best = Some((*lif, cfg.clone(), acc));
        }
    }
    best.unwrap()
}

fn criterion_2(v: &mut Verdict) {
    // Spikey network: f_max (and w_max) tuned on the held-out eval split.
    let lif = LifParams::default();
    let grid: Vec<_> = [0.005, 0.01, 0.02]
        .into_iter()
        .flat_map(|w| [100.0, 150.0, 200.0, 300.0, 400.0].into_iter().map(move |f| (lif, ideal_cfg(f, w))))
        .collect();
    let (lif_s, cfg_s, tuned) = tune(spikey(), &grid, &pooled().eval.head(1000));
    let test = pooled().test.head(CONVERSION_SAMPLES);
    let (ann, snn) = (ann_accuracy(spikey(), &test), snn_accuracy(spikey(), &lif_s, &cfg_s, &test));
    v.check(
        "Spikey network loss",
        ann - snn <= SPIKEY_LOSS_MAX,
        format!(
            "ANN {ann:.2}% SNN {snn:.2}% loss {:.2} (max {SPIKEY_LOSS_MAX}); tuned f_max {} w_max {} ({tuned:.2}% on eval)",
            ann - snn,
            cfg_s.f_max,
            cfg_s.w_max
        ),
    );

    // 784x129x10: tau_m, w_max and f_max tuned on the eval split.
    let nas = builtin("nas129");
    let nas_ann = ann_accuracy(&nas, &full().test);
    v.check("784x129x10 ANN accuracy", nas_ann >= NAS_ANN_MIN, format!("{nas_ann:.2}% (min {NAS_ANN_MIN})"));
    let mut grid = Vec::new();
    for tau_m in [10.0, 20.0] {
        for f in [100.0, 200.0] {
            for wf in [0.3, 0.45, 0.6, 0.8, 1.0, 1.2] {
                grid.push((LifParams { tau_m, ..LifParams::default() }, ideal_cfg(f, wf / f)));
            }
        }
    }
    let (lif_n, cfg_n, tuned) = tune(&nas, &grid, &full().eval.head(500));
    let test = full().test.head(CONVERSION_SAMPLES);
    let (ann, snn) = (ann_accuracy(&nas, &test), snn_accuracy(&nas, &lif_n, &cfg_n, &test));
    v.check(
        "784x129x10 loss",
        ann - snn <= NAS_LOSS_MAX,
        format!(
            "ANN {ann:.2}% SNN {snn:.2}% loss {:.2} (max {NAS_LOSS_MAX}); tuned tau_m {} f_max {} w_max {:.5} ({tuned:.2}% on eval)",
            ann - snn,
            lif_n.tau_m,
            cfg_n.f_max,
            cfg_n.w_max
        ),
    );
}

// 3 ------------------------------------------------------------------------

const SOFTMAX_SAMPLES: usize = 200;

fn mean_non_winner_count(model: &AnnModel, cfg: &ConversionConfig, data: &Dataset) -> f64 {
    let net = convert(model, &LifParams::default(), cfg).unwrap();
    let out = classify(&net, data, cfg).unwrap();
    let per_sample: Vec<f64> = out
        .counts
        .iter()
        .map(|c| {
            let total: u32 = c.iter().sum();
            let winner = *c.iter().max().unwrap();
            (total - winner) as f64 / (c.len() - 1) as f64
        })
        .collect();
    mean(&per_sample)
}

fn criterion_3(v: &mut Verdict) {
    let softmax = builtin("spikey_softmax");
    let data = pooled().test.head(SOFTMAX_SAMPLES);
    let cfg = ideal_cfg(300.0, 0.01);
    let (s, r) = (mean_non_winner_count(&softmax, &cfg, &data), mean_non_winner_count(spikey(), &cfg, &data));
    v.check(
        "non-winner output spikes, softmax > ReLU",
        s > r,
        format!("softmax {s:.3} vs ReLU {r:.3} spikes per non-winner neuron over {SOFTMAX_SAMPLES} samples"),
    );
}

// 4 ------------------------------------------------------------------------

const SWEEP_SAMPLES: usize = 2000;
const PRESENT_TOL: f64 = 1.0;
const RATE_GAIN: f64 = 5.0;
const BANDWIDTH_SEEDS: u64 = 3;

fn criterion_4(v: &mut Verdict) {
    let data = pooled().test.head(SWEEP_SAMPLES);
    let lif = LifParams::default();
    let at = |t_present: f64, f_max: f64| {
        snn_accuracy(spikey(), &lif, &ConversionConfig { t_present, ..ideal_cfg(f_max, 0.01) }, &data)
    };
    let (a200, a1000) = (at(200.0, 300.0), at(1000.0, 300.0));
    v.check(
        "t_present 200 ms vs 1000 ms",
        a200 >= a1000 - PRESENT_TOL,
        format!("{a200:.2}% vs {a1000:.2}% (tolerance {PRESENT_TOL})"),
    );
    let (f10, f40) = (at(200.0, 10.0), at(200.0, 40.0));
    v.check("f_max 40 Hz vs 10 Hz", f40 >= f10 + RATE_GAIN, format!("{f40:.2}% vs {f10:.2}% (gain >= {RATE_GAIN})"));

    // Spikey-like device at its operating point and at twice that rate.
    let profile = HardwareProfile::preset("spikey").unwrap();
    let data = pooled().test.head(1000);
    let op = spikey_device_cfg();
    let doubled = ConversionConfig { f_max: 2.0 * op.f_max, ..op.clone() };
    let (mut acc, mut dropped) = ([Vec::new(), Vec::new()], [0u64, 0u64]);
    for seed in 0..BANDWIDTH_SEEDS {
        for (i, cfg) in [&op, &doubled].into_iter().enumerate() {
            let (out, stats) = device_run(spikey(), &profile, seed, cfg, &data);
            acc[i].push(pct(out.accuracy(&data)));
            dropped[i] += stats.dropped.iter().sum::<u64>();
        }
    }
    let (a_op, a_hi) = (mean(&acc[0]), mean(&acc[1]));
    v.check(
        "Spikey-like device, f_max doubled past the operating point",
        a_hi < a_op && dropped[1] > dropped[0],
        format!(
            "{a_hi:.2}% at {} Hz vs {a_op:.2}% at {} Hz; dropped spikes {} vs {}",
            doubled.f_max, op.f_max, dropped[1], dropped[0]
        ),
    );
}

// 5 ------------------------------------------------------------------------

const PRE_HIL: (f64, f64) = (55.0, 75.0);
const POST_HIL_MIN: f64 = 83.0;
const HIL_LOSS_MAX: f64 = 7.0;
const HIL_SEEDS: u64 = 3;
const HIL_SAMPLES: usize = 2000;
const HIL_BUDGET: Duration = Duration::from_secs(30 * 60);

fn criterion_5(v: &mut Verdict) {
    let profile = HardwareProfile::preset("spikey").unwrap();
    let cfg = spikey_device_cfg();
    let data = pooled().test.head(HIL_SAMPLES);
    let ann = ann_accuracy(spikey(), &data);
    let t = Instant::now();
    let (mut pre, mut post) = (Vec::new(), Vec::new());
    for seed in 0..HIL_SEEDS {
        pre.push(pct(device_run(spikey(), &profile, seed, &cfg, &data).0.accuracy(&data)));
        let hconf = HilConfig {
            epochs: 10,
            learning_rate: 0.002,
            samples_per_epoch: 1000,
            batch_size: 10,
            rate_normalizer: Some(50.0),
            seed,
            ..Default::default()
        };
        let mut dev = DeviceInstance::new(profile.clone(), seed).unwrap();
        let eff = profile.effective_config(&cfg).unwrap();
        let retrained = hil_train(spikey(), &mut dev, &LifParams::default(), &eff, &hconf, &pooled().train).unwrap().model;
        post.push(pct(device_run(&retrained, &profile, seed, &cfg, &data).0.accuracy(&data)));
    }
    let took = t.elapsed();
    let (pre_m, post_m) = (mean(&pre), mean(&post));
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ");
    v.check(
        "pre-HIL accuracy",
        (PRE_HIL.0..=PRE_HIL.1).contains(&pre_m),
        format!("{pre_m:.2}% [{}] (band {:?})", fmt(&pre), PRE_HIL),
    );
    v.check("post-HIL accuracy", post_m >= POST_HIL_MIN, format!("{post_m:.2}% [{}] (min {POST_HIL_MIN})", fmt(&post)));
    v.check(
        "post-HIL conversion loss",
        ann - post_m <= HIL_LOSS_MAX,
        format!("ANN {ann:.2}% - {post_m:.2}% = {:.2} (max {HIL_LOSS_MAX})", ann - post_m),
    );
    v.check("runtime", took <= HIL_BUDGET, format!("{:.0} s (limit {} s)", took.as_secs_f64(), HIL_BUDGET.as_secs()));
}

// 6 ------------------------------------------------------------------------

const METERED_MJ: f64 = 10.14;
const GENN_CPU_WALL_MS: f64 = 5070.0;
const GENN_CPU_MJ: f64 = 10.0;
const BRAINSCALES_MJ: f64 = 0.33;
const ANALOG_FACTOR: f64 = 10.0;

fn criterion_6(v: &mut Verdict) {
    let stats = |n: usize, wall_ms: f64| RunStats {
        n_samples: n,
        instances: 1,
        model_time_ms: 0.0,
        wall_clock_ms: wall_ms,
        presynaptic_events: 0,
        synaptic_events: 0,
        generated: vec![],
        delivered: vec![],
        dropped: vec![],
    };
    let ten_watts = HardwareProfile { energy_model: EnergyModel::Metered { active_power_w: 10.0 }, ..HardwareProfile::ideal() };
    let mj = 1000.0 * estimate_energy(&stats(5000, 5070.0), &ten_watts).unwrap();
    v.check("10 W x 5.07 s / 5000", (mj - METERED_MJ).abs() < 5e-3, format!("{mj:.4} mJ (expected {METERED_MJ})"));

    // Full test set, batch size 10000, on the configured presets.
    let data = &pooled().test;
    let genn = HardwareProfile::preset("genn_cpu").unwrap();
    let (_, s) = device_run(spikey(), &genn, 0, &ideal_cfg(300.0, 0.01), data);
    let genn_mj = 1000.0 * estimate_energy(&s, &genn).unwrap();
    v.check(
        "GeNN-CPU-like preset",
        (s.wall_clock_ms - GENN_CPU_WALL_MS).abs() <= 0.01 * GENN_CPU_WALL_MS && (genn_mj - GENN_CPU_MJ).abs() <= 0.5,
        format!("{:.0} ms, {genn_mj:.2} mJ (reference {GENN_CPU_WALL_MS} ms, {GENN_CPU_MJ} mJ)", s.wall_clock_ms),
    );
    let bss = HardwareProfile::preset("brainscales").unwrap();
    let (_, s) = device_run(spikey(), &bss, 0, &spikey_device_cfg(), data);
    let bss_mj = 1000.0 * estimate_energy(&s, &bss).unwrap();
    v.check(
        "event-based analog energy vs digital",
        bss_mj * ANALOG_FACTOR <= genn_mj,
        format!("{bss_mj:.3} mJ vs {genn_mj:.2} mJ (factor {:.0}, min {ANALOG_FACTOR})", genn_mj / bss_mj),
    );
    v.check(
        "event-based analog energy magnitude",
        (BRAINSCALES_MJ / 2.0..=BRAINSCALES_MJ * 2.0).contains(&bss_mj),
        format!("{bss_mj:.3} mJ from {} presynaptic events (reference {BRAINSCALES_MJ} mJ, within 2x)", s.presynaptic_events),
    );
}

// 7 ------------------------------------------------------------------------

const RANK_DRAWS: usize = 100_000;
const RANK_SEED: u64 = 2024;
const RANK_SIGMAS: f64 = 3.0;
const DESK_MIN_ACCURACY: f64 = 0.95;
const DESK_BUDGET: Duration = Duration::from_secs(2 * 3600);

fn mock_accuracy(g: &Genome, _seed: u64) -> snnbench::Result<(f64, usize)> {
    let n = g.neuron_count();
    Ok((0.90 + 0.09 * (1.0 - (-(n as f64) / 400.0).exp()), n))
}

fn fitness(r: &TraceRecord) -> Fitness {
    Fitness { eval_accuracy: r.accuracy, neuron_count: r.neurons }
}

fn criterion_7(v: &mut Verdict) {
    let full_cfg = NasConfig::full_scale();
    let n = full_cfg.population;
    let base = full_cfg.ranking_base;
    let mut rng = ChaCha8Rng::seed_from_u64(RANK_SEED);
    let mut hits = vec![0usize; n];
    for _ in 0..RANK_DRAWS {
        hits[ranked_draw(n, 1, base, &mut rng)[0]] += 1;
    }
    let norm: f64 = (0..n).map(|r| base.powi(r as i32)).sum();
    let z: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(r, &h)| {
            let p = base.powi(r as i32) / norm;
            (h as f64 - p * RANK_DRAWS as f64) / (RANK_DRAWS as f64 * p * (1.0 - p)).sqrt()
        })
        .collect();
    let (worst, worst_z) = z.iter().enumerate().fold((0, 0.0f64), |a, (r, &x)| if x.abs() > a.1.abs() { (r, x) } else { a });
    v.check(
        "ranking frequencies within 3 sigma",
        z.iter().all(|x| x.abs() <= RANK_SIGMAS),
        format!("{RANK_DRAWS} draws over {n} ranks, seed {RANK_SEED}: largest deviation rank {worst} at {worst_z:.2} sigma"),
    );

    let mock_cfg = NasConfig { input_dim: 6, output_dim: 3, population: 8, parents: 4, elitism: 2, generations: 10, ..NasConfig::desk_scale() };
    let out = evolve(&mock_cfg, &mock_accuracy, &mut |_| Ok(())).unwrap();
    let mut lost = Vec::new();
    for g in 0..mock_cfg.generations - 1 {
        let mut cur: Vec<&TraceRecord> = out.trace.iter().filter(|r| r.generation == g).collect();
        cur.sort_by(|a, b| compare_fitness(&fitness(b), &fitness(a), &mock_cfg));
        let next: Vec<&str> = out.trace.iter().filter(|r| r.generation == g + 1).map(|r| r.hash.as_str()).collect();
        lost.extend(cur[..mock_cfg.elitism].iter().filter(|e| !next.contains(&e.hash.as_str())).map(|e| (g, e.hash.clone())));
    }
    v.check("elitism over a 10-generation mock run", lost.is_empty(), format!("elites lost: {lost:?}"));

    let node = |id, width, key| NodeGene { id, width, key };
    let a = Genome::new(6, 3, vec![node(2, 8, 0.5)], [(INPUT, 2), (2, OUTPUT)]).unwrap();
    let b = Genome::new(6, 3, vec![node(3, 9, 0.4)], [(INPUT, 3), (3, OUTPUT)]).unwrap();
    let mut meta = MetaGraph::from_genome(&a);
    meta.insert(&b);
    let mut present = Vec::new();
    for _ in 0..6 {
        present.push(meta.contains(Element::Node(2)));
        meta.advance(&b);
    }
    let gone = !meta.contains(Element::Edge(INPUT, 2)) && !meta.contains(Element::Edge(2, OUTPUT));
    v.check(
        "meta-graph forgets after 5 unused steps",
        present == [true, true, true, true, true, false] && gone && meta.contains(Element::Node(3)),
        format!("node present after 0..5 steps: {present:?}"),
    );

    let nas129 = Fitness { eval_accuracy: 0.9753, neuron_count: 129 };
    let nas63 = Fitness { eval_accuracy: 0.9676, neuron_count: 63 };
    v.check(
        "comparator prefers 97.53%/129n over 96.76%/63n",
        compare_fitness(&nas129, &nas63, &full_cfg).is_gt(),
        format!("{:?}", compare_fitness(&nas129, &nas63, &full_cfg)),
    );

    desk_search(v);
}

/// Runs the pop-12/10-generation search when `NAS_DESK` is set; otherwise
/// reads the stored trace of the last such run.
fn desk_search(v: &mut Verdict) {
    if std::env::var_os("NAS_DESK").is_some() {
        let cfg = NasConfig::desk_scale();
        let evaluator = TrainingEvaluator {
            train: &pooled().train,
            eval: &pooled().eval,
            cfg: TrainConfig { epochs: 5, ..TrainConfig::default() },
        };
        let t = Instant::now();
        let out = evolve(&cfg, &evaluator, &mut |r| {
            eprintln!("{}", serde_json::to_string(&r).unwrap());
            Ok(())
        })
        .unwrap();
        let best = out.pareto.iter().map(|p| p.accuracy).fold(0.0, f64::max);
        let took = t.elapsed();
        v.check(
            "desk search (soft)",
            best >= DESK_MIN_ACCURACY && took <= DESK_BUDGET,
            format!("Pareto max {:.2}% in {:.0} s", pct(best), took.as_secs_f64()),
        );
        return;
    }
    let path = workspace_root().join("experiments/runs/nas_desk/pareto.csv");
    let best = csv::Reader::from_path(&path)
        .map(|mut r| r.deserialize::<(String, f64, usize, bool, String)>().filter_map(|x| x.ok()).map(|x| x.1).fold(0.0, f64::max));
    match best {
        Ok(best) => v.check(
            "desk search (soft, stored run; NAS_DESK=1 reruns it)",
            best >= DESK_MIN_ACCURACY,
            format!("Pareto max {:.2}% in experiments/runs/nas_desk", pct(best)),
        ),
        Err(e) => v.check("desk search (soft)", false, format!("no stored run: {e}")),
    }
}

// 8 ------------------------------------------------------------------------

const RATE_TOL: f64 = 0.05;
const DECAY_TOL: f64 = 0.02;
const RANDOM_STEPS: usize = 10_000;

fn criterion_8(v: &mut Verdict) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Array2::from_shape_fn((30, 20), |_| rng.random_range(0.0..0.0016));
    let net = SnnNetwork::new(vec![w], vec![LifParams::default()], 1.0).unwrap();
    let inputs: Vec<Vec<f64>> = (0..30).map(|_| regular_train(rng.random_range(20.0..80.0), 1000.0)).collect();
    let coarse = run(&net, &inputs, 1000.0, &[]).unwrap().counts[1].clone();
    let fine = oracle::fine_step_counts(net.projections(), net.lif(1), &inputs, 1000.0, 0.01).remove(0);
    let worst = coarse
        .iter()
        .zip(&fine)
        .map(|(&c, &f)| if f == 0 { f64::INFINITY } else { (c as f64 - f as f64).abs() / f as f64 })
        .fold(0.0, f64::max);
    v.check(
        "20-neuron rates vs 0.01 ms reference",
        worst <= RATE_TOL,
        format!("worst relative deviation {:.2}% (max {}%)", pct(worst), pct(RATE_TOL)),
    );

    let lif = LifParams::default();
    let single = SnnNetwork::new(vec![Array2::zeros((1, 1))], vec![lif], 1.0).unwrap();
    let mut sim = Simulator::new(&single, None, 0.0, 0).unwrap();
    sim.state_mut(1).v[0] = lif.v_rest + 10.0;
    let steps = lif.tau_m as usize;
    sim.run(&InputSchedule::default(), steps, steps, &[]).unwrap();
    let (got, expected) = (sim.state(1).v[0] - lif.v_rest, 10.0 * (-1.0f64).exp());
    let rel = (got - expected).abs() / expected;
    v.check(
        "membrane decay at t = tau_m",
        rel <= DECAY_TOL,
        format!("{got:.4} mV vs {expected:.4} mV ({:.2}%, max {}%)", pct(rel), pct(DECAY_TOL)),
    );

    let w1 = Array2::from_shape_fn((8, 6), |_| rng.random_range(-0.02..=0.02));
    let w2 = Array2::from_shape_fn((6, 4), |_| rng.random_range(-0.02..=0.02));
    let lif = LifParams { t_refrac: 2.0, ..LifParams::default() };
    let net = SnnNetwork::new(vec![w1, w2], vec![lif; 2], 1.0).unwrap();
    let duration = RANDOM_STEPS as f64;
    let inputs: Vec<Vec<f64>> = (0..8).map(|_| poisson_train(rng.random_range(20.0..200.0), duration, &mut rng)).collect();
    let schedule = InputSchedule::from_trains(&inputs, 1.0, duration);
    let mut sim = Simulator::new(&net, None, 0.5, 3).unwrap();
    let mut spiked = vec![Vec::new(); 3];
    let mut last = vec![vec![f64::NEG_INFINITY; 6], vec![f64::NEG_INFINITY; 4]];
    let (mut negative, mut short_isi, mut spikes) = (0, 0, 0);
    for (t, input) in schedule.steps.iter().enumerate() {
        sim.step(input, &mut spiked).unwrap();
        for l in 1..3 {
            let st = sim.state(l);
            negative += st.g_e.iter().chain(&st.g_i).filter(|&&g| g < 0.0).count();
            for &j in &spiked[l] {
                let ts = t as f64 + st.spike_offset[j as usize];
                if ts - last[l - 1][j as usize] < lif.t_refrac - 1e-9 {
                    short_isi += 1;
                }
                last[l - 1][j as usize] = ts;
                spikes += 1;
            }
        }
    }
    v.check(
        "refractory and conductance invariants",
        negative == 0 && short_isi == 0 && spikes > 0 && schedule.steps.len() >= RANDOM_STEPS,
        format!(
            "{} steps, {spikes} spikes: {short_isi} intervals below t_refrac, {negative} negative conductances",
            schedule.steps.len()
        ),
    );
}

// 9 ------------------------------------------------------------------------

fn criterion_9(v: &mut Verdict) {
    let spec = json!({
        "name": "determinism",
        "network": { "kind": "builtin", "name": "spikey" },
        "platform": "spikey",
        "conversion": { "w_max": 0.006, "f_max": 150.0, "t_present": 200.0, "t_gap": 50.0 },
        "sweep": [{ "path": "conversion.f_max", "values": [100.0, 150.0] }],
        "repetitions": 2,
        "samples": 200,
        "seed": 7
    });
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let parsed = ExperimentSpec::from_json(&spec.to_string()).unwrap();
        let results = run_experiment(&parsed, snnbench_suite::store()).unwrap();
        let dir = tmp.path().join(name);
        write_results_dir(&dir, &serde_json::to_value(&parsed).unwrap(), &results).unwrap();
        runs.push(dir);
    }
    for f in ["results.csv", "results.json"] {
        let (a, b) = (std::fs::read(runs[0].join(f)).unwrap(), std::fs::read(runs[1].join(f)).unwrap());
        v.check(&format!("{f} byte-identical"), a == b && !a.is_empty(), format!("{} bytes vs {} bytes", a.len(), b.len()));
    }
}

// ---------------------------------------------------------------------------

type Criterion = fn(&mut Verdict);

fn main() {
    let criteria: [(u32, &str, Criterion); 9] = [
        (1, "ANN baseline", criterion_1),
        (2, "conversion loss, ideal simulator", criterion_2),
        (3, "softmax output activity", criterion_3),
        (4, "sweep shape", criterion_4),
        (5, "analog degradation and HIL recovery", criterion_5),
        (6, "energy accounting", criterion_6),
        (7, "NAS properties", criterion_7),
        (8, "simulator oracle", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut verdicts = Vec::new();
    for (id, title, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let mut v = Verdict::new(id, title);
        let t = Instant::now();
        if let Err(e) = catch_unwind(AssertUnwindSafe(|| run(&mut v))) {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            v.check("completed", false, format!("panicked: {}", msg.unwrap_or_default()));
        }
        v.elapsed = t.elapsed();
        print!("{}", v.render());
        verdicts.push(v);
    }
    let passed = verdicts.iter().filter(|v| v.passed()).count();
    println!("\nacceptance: {passed}/{} criteria passed", verdicts.len());
    for v in verdicts.iter().filter(|v| !v.passed()) {
        println!("  FAIL criterion {} ({})", v.id, v.title);
    }
    if passed != verdicts.len() {
        std::process::exit(1);
    }
}
