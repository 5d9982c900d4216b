//! Genetic architecture search over dense-layer DAGs, guided by a meta graph
//! that accumulates structure from ancestors and forgets unused elements.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ann::{argmax, batch_matrix, softmax_rows, AnnModel, LossKind, OutputHead, TrainConfig};
use crate::error::{Error, Result};
use crate::mnist_data::Dataset;

pub type NodeId = u64;
pub const INPUT: NodeId = 0;
pub const OUTPUT: NodeId = 1;

/// Exploration steps after which an unused meta-graph element is dropped.
pub const FORGET_AFTER: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeGene {
    pub id: NodeId,
    pub width: usize,
    /// Position in `(0, 1)`; edges always point to larger keys.
    pub key: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fitness {
    /// Evaluation accuracy as a fraction.
    pub eval_accuracy: f64,
    pub neuron_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NasConfig {
    pub population: usize,
    pub parents: usize,
    pub elitism: usize,
    pub generations: usize,
    /// Fraction above which neuron count starts to matter.
    pub accuracy_threshold: f64,
    /// Neurons worth one percentage point of accuracy.
    pub neurons_per_percent: f64,
    pub ranking_base: f64,
    /// Sampling weight of never-examined candidate elements.
    pub novelty_bonus: f64,
    /// Probability of adding another input-output path to a child.
    pub extra_path_prob: f64,
    pub max_paths: usize,
    /// Hidden layers per path.
    pub max_depth: usize,
    pub min_width: usize,
    pub max_width: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for NasConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl NasConfig {
    /// 36 genomes, 20 parents, 2 elites, 75 generations.
    pub fn full_scale() -> Self {
        Self {
            population: 36,
            parents: 20,
            elitism: 2,
            generations: 75,
            accuracy_threshold: 0.97,
            neurons_per_percent: 100.0,
            ranking_base: 0.9,
            novelty_bonus: 0.3,
            extra_path_prob: 0.25,
            max_paths: 3,
            max_depth: 3,
            min_width: 10,
            max_width: 1500,
            input_dim: 784,
            output_dim: 10,
            seed: 0,
        }
    }

    /// Small search on the down-scaled inputs.
    pub fn desk_scale() -> Self {
        Self { population: 12, parents: 7, generations: 10, input_dim: 89, ..Self::full_scale() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.parents == 0 || self.parents > self.population {
            return Err(Error::Config("need 0 < parents <= population".into()));
        }
        if self.elitism >= self.population {
            return Err(Error::Config("elitism must be smaller than the population".into()));
        }
        if !(0.0..=1.0).contains(&self.ranking_base) || !(self.novelty_bonus >= 0.0) {
            return Err(Error::Config("ranking_base must lie in [0, 1] and novelty_bonus be >= 0".into()));
        }
        if self.min_width == 0 || self.min_width > self.max_width || self.max_depth == 0 || self.max_paths == 0 {
            return Err(Error::Config("invalid width or depth limits".into()));
        }
        if !(self.neurons_per_percent > 0.0) {
            return Err(Error::Config("neurons_per_percent must be positive".into()));
        }
        Ok(())
    }

    /// Log-uniform layer width.
    pub fn sample_width(&self, rng: &mut impl Rng) -> usize {
        let (lo, hi) = ((self.min_width as f64).ln(), (self.max_width as f64 + 1.0).ln());
        (rng.random_range(lo..hi).exp().floor() as usize).clamp(self.min_width, self.max_width)
    }
}

/// `Greater` when `a` is the better architecture.
pub fn compare_fitness(a: &Fitness, b: &Fitness, cfg: &NasConfig) -> Ordering {
    let above_a = a.eval_accuracy >= cfg.accuracy_threshold;
    let above_b = b.eval_accuracy >= cfg.accuracy_threshold;
    let primary = match (above_a, above_b) {
        (false, false) => a.eval_accuracy.total_cmp(&b.eval_accuracy),
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (true, true) => {
            let score = |f: &Fitness| 100.0 * f.eval_accuracy - f.neuron_count as f64 / cfg.neurons_per_percent;
            score(a).total_cmp(&score(b))
        }
    };
    primary.then_with(|| b.neuron_count.cmp(&a.neuron_count))
}

/// Dense-layer DAG from the input node to the output node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden nodes ordered by key.
    nodes: Vec<NodeGene>,
    edges: BTreeSet<(NodeId, NodeId)>,
    #[serde(default)]
    pub fitness: Option<Fitness>,
}

impl Genome {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        mut nodes: Vec<NodeGene>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> Result<Self> {
        nodes.sort_by(|a, b| a.key.total_cmp(&b.key));
        let g = Self { input_dim, output_dim, nodes, edges: edges.into_iter().collect(), fitness: None };
        g.validate()?;
        Ok(g)
    }

    /// Chain `input -> widths[0] -> ... -> output`; node ids start at
    /// `first_id`.
    pub fn sequential(input_dim: usize, widths: &[usize], output_dim: usize, first_id: NodeId) -> Result<Self> {
        let nodes: Vec<NodeGene> = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| NodeGene { id: first_id + i as u64, width: w, key: (i + 1) as f64 / (widths.len() + 1) as f64 })
            .collect();
        let mut chain = vec![INPUT];
        chain.extend(nodes.iter().map(|n| n.id));
        chain.push(OUTPUT);
        Self::new(input_dim, output_dim, nodes, chain.windows(2).map(|p| (p[0], p[1])))
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("invalid genome: {m}")));
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("empty input or output".into());
        }
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if n.id == INPUT || n.id == OUTPUT || !seen.insert(n.id) {
                return bad(format!("duplicate or reserved node id {}", n.id));
            }
            if n.width == 0 || !(n.key > 0.0 && n.key < 1.0) {
                return bad(format!("node {} needs width > 0 and key in (0, 1)", n.id));
            }
        }
        for &(a, b) in &self.edges {
            match (self.key(a), self.key(b)) {
                (Some(ka), Some(kb)) if ka < kb => {}
                _ => return bad(format!("edge {a}->{b} is unknown or points backwards")),
            }
        }
        let fwd = self.reachable(INPUT, false);
        let bwd = self.reachable(OUTPUT, true);
        if !fwd.contains(&OUTPUT) {
            return bad("output not reachable".into());
        }
        if let Some(n) = self.nodes.iter().find(|n| !fwd.contains(&n.id) || !bwd.contains(&n.id)) {
            return bad(format!("node {} is not on an input-output path", n.id));
        }
        Ok(())
    }

    fn reachable(&self, start: NodeId, backwards: bool) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &(a, b) in &self.edges {
                let (from, to) = if backwards { (b, a) } else { (a, b) };
                if from == u && seen.insert(to) {
                    stack.push(to);
                }
            }
        }
        seen
    }

    pub fn key(&self, id: NodeId) -> Option<f64> {
        match id {
            INPUT => Some(0.0),
            OUTPUT => Some(1.0),
            _ => self.nodes.iter().find(|n| n.id == id).map(|n| n.key),
        }
    }

    pub fn width(&self, id: NodeId) -> Option<usize> {
        match id {
            INPUT => Some(self.input_dim),
            OUTPUT => Some(self.output_dim),
            _ => self.nodes.iter().find(|n| n.id == id).map(|n| n.width),
        }
    }

    pub fn hidden(&self) -> &[NodeGene] {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.edges
    }

    /// Input, hidden nodes by key, output.
    pub fn topo_order(&self) -> Vec<NodeId> {
        let mut order = vec![INPUT];
        order.extend(self.nodes.iter().map(|n| n.id));
        order.push(OUTPUT);
        order
    }

    /// Hidden neurons.
    pub fn neuron_count(&self) -> usize {
        self.nodes.iter().map(|n| n.width).sum()
    }

    pub fn is_sequential(&self) -> bool {
        let order = self.topo_order();
        self.edges.len() == order.len() - 1 && order.windows(2).all(|p| self.edges.contains(&(p[0], p[1])))
    }

    /// Layer sizes of a sequential genome.
    pub fn layer_dims(&self) -> Option<Vec<usize>> {
        self.is_sequential().then(|| self.topo_order().iter().map(|&id| self.width(id).unwrap()).collect())
    }

    /// Structure with node ids replaced by topological positions.
    pub fn canonical(&self) -> (Vec<usize>, Vec<(usize, usize)>) {
        let order = self.topo_order();
        let pos: HashMap<NodeId, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let widths = order.iter().map(|&id| self.width(id).unwrap()).collect();
        let mut edges: Vec<(usize, usize)> = self.edges.iter().map(|(a, b)| (pos[a], pos[b])).collect();
        edges.sort_unstable();
        (widths, edges)
    }

    /// Hex digest of the canonical structure; equal for structurally equal
    /// genomes regardless of node ids.
    pub fn structure_hash(&self) -> String {
        let (widths, edges) = self.canonical();
        let text = serde_json::to_string(&(widths, edges)).expect("plain data");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn fitness_key(&self) -> Result<Fitness> {
        self.fitness.ok_or(Error::Unevaluated)
    }

    fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        self.nodes.iter().map(|n| Element::Node(n.id)).chain(self.edges.iter().map(|&(a, b)| Element::Edge(a, b)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Element {
    Node(NodeId),
    Edge(NodeId, NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementInfo {
    pub best: Option<Fitness>,
    pub last_used: u64,
}

/// Union of the structures an individual descends from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaGraph {
    pub input_dim: usize,
    pub output_dim: usize,
    nodes: BTreeMap<NodeId, NodeGene>,
    info: BTreeMap<Element, ElementInfo>,
    /// Exploration steps this graph has taken part in.
    pub step: u64,
}

impl MetaGraph {
    pub fn from_genome(g: &Genome) -> Self {
        let mut m = Self {
            input_dim: g.input_dim,
            output_dim: g.output_dim,
            nodes: BTreeMap::new(),
            info: BTreeMap::new(),
            step: 0,
        };
        m.insert(g);
        m
    }

    pub fn contains(&self, e: Element) -> bool {
        self.info.contains_key(&e)
    }

    pub fn info(&self, e: Element) -> Option<&ElementInfo> {
        self.info.get(&e)
    }

    pub fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        self.info.keys().copied()
    }

    pub fn contains_genome(&self, g: &Genome) -> bool {
        g.elements().all(|e| self.contains(e))
    }

    fn key(&self, id: NodeId) -> f64 {
        match id {
            INPUT => 0.0,
            OUTPUT => 1.0,
            _ => self.nodes[&id].key,
        }
    }

    /// Adds the genome's elements and marks them used at the current step.
    pub fn insert(&mut self, g: &Genome) {
        for n in g.hidden() {
            self.nodes.insert(n.id, *n);
        }
        let step = self.step;
        for e in g.elements() {
            self.info.entry(e).or_insert(ElementInfo { best: None, last_used: step }).last_used = step;
        }
    }

    /// Element-wise union; keeps the later use and the better fitness.
    pub fn union(a: &MetaGraph, b: &MetaGraph, cfg: &NasConfig) -> MetaGraph {
        let mut m = a.clone();
        m.step = a.step.max(b.step);
        m.nodes.extend(b.nodes.iter().map(|(k, v)| (*k, *v)));
        for (e, ib) in &b.info {
            m.info
                .entry(*e)
                .and_modify(|ia| {
                    ia.last_used = ia.last_used.max(ib.last_used);
                    ia.best = better(ia.best, ib.best, cfg);
                })
                .or_insert(*ib);
        }
        m
    }

    /// One exploration step in which `used` was examined.
    pub fn advance(&mut self, used: &Genome) {
        self.step += 1;
        self.insert(used);
        self.prune();
    }

    /// Drops elements unused for [`FORGET_AFTER`] steps and edges whose
    /// endpoints are gone.
    pub fn prune(&mut self) {
        let step = self.step;
        self.info.retain(|_, i| step - i.last_used.min(step) < FORGET_AFTER);
        let live: BTreeSet<NodeId> = self
            .info
            .keys()
            .filter_map(|e| match e {
                Element::Node(id) => Some(*id),
                _ => None,
            })
            .collect();
        self.nodes.retain(|id, _| live.contains(id));
        self.info.retain(|e, _| match e {
            Element::Edge(a, b) => [a, b].iter().all(|id| **id == INPUT || **id == OUTPUT || live.contains(id)),
            _ => true,
        });
    }

    /// Credits every element of `g` with its fitness.
    pub fn record_fitness(&mut self, g: &Genome, f: Fitness, cfg: &NasConfig) {
        for e in g.elements() {
            if let Some(i) = self.info.get_mut(&e) {
                i.best = better(i.best, Some(f), cfg);
            }
        }
    }

    /// Sampling weight per element: `ranking_base^rank` of its best fitness
    /// among all distinct fitness values; unevaluated elements rank last.
    fn qualities(&self, cfg: &NasConfig) -> BTreeMap<Element, f64> {
        let mut distinct: Vec<Fitness> = self.info.values().filter_map(|i| i.best).collect();
        distinct.sort_by(|a, b| compare_fitness(b, a, cfg));
        distinct.dedup_by(|a, b| compare_fitness(a, b, cfg) == Ordering::Equal);
        let base = cfg.ranking_base.max(1e-6);
        self.info
            .iter()
            .map(|(e, i)| {
                let rank = match i.best {
                    Some(f) => distinct.iter().position(|d| compare_fitness(d, &f, cfg) == Ordering::Equal).unwrap(),
                    None => distinct.len(),
                };
                (*e, base.powi(rank as i32))
            })
            .collect()
    }

    /// Nodes with a known path to the output.
    fn reaches_output(&self) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([OUTPUT]);
        loop {
            let before = seen.len();
            for e in self.info.keys() {
                if let Element::Edge(a, b) = e {
                    if seen.contains(b) {
                        seen.insert(*a);
                    }
                }
            }
            if seen.len() == before {
                return seen;
            }
        }
    }
}

fn better(a: Option<Fitness>, b: Option<Fitness>, cfg: &NasConfig) -> Option<Fitness> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if compare_fitness(&y, &x, cfg) == Ordering::Greater { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

/// A genome together with its meta graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Genome,
    pub meta: MetaGraph,
}

impl Individual {
    pub fn new(genome: Genome) -> Self {
        let meta = MetaGraph::from_genome(&genome);
        Self { genome, meta }
    }

    pub fn set_fitness(&mut self, f: Fitness, cfg: &NasConfig) {
        self.genome.fitness = Some(f);
        self.meta.record_fitness(&self.genome, f, cfg);
    }
}

/// Monotone source of fresh node ids.
#[derive(Debug, Clone)]
pub struct IdAlloc(NodeId);

impl Default for IdAlloc {
    fn default() -> Self {
        Self(OUTPUT + 1)
    }
}

impl IdAlloc {
    pub fn starting_at(next: NodeId) -> Self {
        Self(next.max(OUTPUT + 1))
    }

    pub fn next_id(&mut self) -> NodeId {
        let id = self.0;
        self.0 += 1;
        id
    }
}

fn pick(weights: &[f64], rng: &mut impl Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return Some(i);
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0)
}

/// Indices sorted best first; equal fitness keeps population order.
pub fn rank_order(pop: &[Individual], cfg: &NasConfig) -> Result<Vec<usize>> {
    let keys: Vec<Fitness> = pop.iter().map(|i| i.genome.fitness_key()).collect::<Result<_>>()?;
    let mut idx: Vec<usize> = (0..pop.len()).collect();
    idx.sort_by(|&a, &b| compare_fitness(&keys[b], &keys[a], cfg));
    Ok(idx)
}

/// Draws `cfg.parents` distinct individuals with probability proportional to
/// `ranking_base^rank`.
pub fn select(pop: &[Individual], cfg: &NasConfig, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let ranked = rank_order(pop, cfg)?;
    Ok(ranked_draw(ranked.len(), cfg.parents, cfg.ranking_base, rng).into_iter().map(|r| ranked[r]).collect())
}

/// Draws `k` distinct ranks out of `n` with weights `base^rank`.
pub fn ranked_draw(n: usize, k: usize, base: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut left: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(k.min(n));
    while out.len() < k && !left.is_empty() {
        let lowest = left[0];
        let w: Vec<f64> = left.iter().map(|&r| base.powi((r - lowest) as i32)).collect();
        let i = pick(&w, rng).unwrap_or(0);
        out.push(left.remove(i));
    }
    out
}

enum Step {
    Known(NodeId),
    Fresh,
    Novel(NodeId),
}

/// Samples one input-output path through `meta`, adding fresh nodes to it.
fn sample_path(meta: &mut MetaGraph, cfg: &NasConfig, rng: &mut impl Rng, ids: &mut IdAlloc) -> Vec<NodeId> {
    let quality = meta.qualities(cfg);
    let reach = meta.reaches_output();
    let mut path = vec![INPUT];
    let mut cur = INPUT;
    while cur != OUTPUT {
        let depth = path.len() - 1;
        let k = meta.key(cur);
        let deep = depth >= cfg.max_depth;
        let mut options = Vec::new();
        let mut weights = Vec::new();
        for (e, q) in &quality {
            if let Element::Edge(a, b) = *e {
                if a == cur && reach.contains(&b) && (!deep || b == OUTPUT) {
                    options.push(Step::Known(b));
                    weights.push(*q);
                }
            }
        }
        if cfg.novelty_bonus > 0.0 {
            if !deep {
                options.push(Step::Fresh);
                weights.push(cfg.novelty_bonus);
            }
            let novel: Vec<NodeId> = meta
                .nodes
                .values()
                .filter(|n| n.key > k && !deep && reach.contains(&n.id))
                .map(|n| n.id)
                .chain(std::iter::once(OUTPUT))
                .filter(|&v| !meta.contains(Element::Edge(cur, v)))
                .collect();
            if !novel.is_empty() {
                let share = cfg.novelty_bonus / novel.len() as f64;
                for v in novel {
                    options.push(Step::Novel(v));
                    weights.push(share);
                }
            }
        }
        let next = match pick(&weights, rng).map(|i| &options[i]) {
            Some(Step::Known(v)) | Some(Step::Novel(v)) => *v,
            Some(Step::Fresh) => {
                let gene = NodeGene { id: ids.next_id(), width: cfg.sample_width(rng), key: rng.random_range(k..1.0) };
                let gene = NodeGene { key: if gene.key > k { gene.key } else { (k + 1.0) / 2.0 }, ..gene };
                meta.nodes.insert(gene.id, gene);
                gene.id
            }
            None => OUTPUT,
        };
        path.push(next);
        cur = next;
    }
    path
}

/// Samples a child from the merged meta graphs of `a` and `b`.
pub fn recombine(a: &Individual, b: &Individual, cfg: &NasConfig, rng: &mut impl Rng, ids: &mut IdAlloc) -> Result<Individual> {
    let meta = MetaGraph::union(&a.meta, &b.meta, cfg);
    let mut work = meta.clone();
    work.step += 1;
    let mut meta = meta;
    let mut nodes = BTreeMap::new();
    let mut edges = BTreeSet::new();
    let mut paths = 0;
    loop {
        let path = sample_path(&mut work, cfg, rng, ids);
        for p in path.windows(2) {
            edges.insert((p[0], p[1]));
            work.info.entry(Element::Edge(p[0], p[1])).or_insert(ElementInfo { best: None, last_used: work.step });
        }
        for id in &path[1..path.len() - 1] {
            nodes.insert(*id, work.nodes[id]);
            work.info.entry(Element::Node(*id)).or_insert(ElementInfo { best: None, last_used: work.step });
        }
        paths += 1;
        if paths >= cfg.max_paths || !rng.random_bool(cfg.extra_path_prob.clamp(0.0, 1.0)) {
            break;
        }
    }
    let genome = Genome::new(meta.input_dim, meta.output_dim, nodes.into_values().collect(), edges)?;
    meta.advance(&genome);
    Ok(Individual { genome, meta })
}

/// Random sequential genome with one to `max_depth` hidden layers.
pub fn random_genome(cfg: &NasConfig, rng: &mut impl Rng, ids: &mut IdAlloc) -> Result<Genome> {
    let depth = rng.random_range(1..=cfg.max_depth.min(2));
    let widths: Vec<usize> = (0..depth).map(|_| cfg.sample_width(rng)).collect();
    let first = ids.next_id();
    for _ in 1..depth {
        ids.next_id();
    }
    Genome::sequential(cfg.input_dim, &widths, cfg.output_dim, first)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub generation: usize,
    pub slot: usize,
    pub hash: String,
    /// Widths in topological order, input and output included.
    pub dims: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub sequential: bool,
    pub accuracy: f64,
    pub neurons: usize,
    pub elite: bool,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub hash: String,
    pub accuracy: f64,
    pub neurons: usize,
    pub sequential: bool,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct NasOutcome {
    pub trace: Vec<TraceRecord>,
    /// Final population, best first.
    pub population: Vec<Individual>,
    pub best: Genome,
    pub pareto: Vec<ParetoPoint>,
    /// Every distinct evaluated structure.
    pub evaluated: BTreeMap<String, Genome>,
}

impl NasOutcome {
    pub fn write_trace_jsonl(&self, w: &mut dyn Write) -> Result<()> {
        for r in &self.trace {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn write_pareto_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        write_pareto_csv(&self.pareto, w)
    }
}

pub fn write_pareto_csv(front: &[ParetoPoint], w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "hash,accuracy,neurons,sequential,dims")?;
    for p in front {
        let dims: Vec<String> = p.dims.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{},{},{},{},{}", p.hash, p.accuracy, p.neurons, p.sequential, dims.join("x"))?;
    }
    Ok(())
}

/// Non-dominated points in (accuracy up, neurons down), by neuron count.
pub fn pareto_front(evaluated: &BTreeMap<String, Genome>) -> Vec<ParetoPoint> {
    let pts: Vec<(&String, &Genome, Fitness)> =
        evaluated.iter().filter_map(|(h, g)| g.fitness.map(|f| (h, g, f))).collect();
    let mut front: Vec<ParetoPoint> = pts
        .iter()
        .filter(|(_, _, f)| {
            !pts.iter().any(|(_, _, o)| {
                o.eval_accuracy >= f.eval_accuracy
                    && o.neuron_count <= f.neuron_count
                    && (o.eval_accuracy > f.eval_accuracy || o.neuron_count < f.neuron_count)
            })
        })
        .map(|(h, g, f)| ParetoPoint {
            hash: (*h).clone(),
            accuracy: f.eval_accuracy,
            neurons: f.neuron_count,
            sequential: g.is_sequential(),
            dims: g.canonical().0,
        })
        .collect();
    front.sort_by(|a, b| a.neurons.cmp(&b.neurons).then(a.hash.cmp(&b.hash)));
    front
}

fn slot_rng(seed: u64, generation: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((generation as u64) << 32) | slot as u64);
    rng
}

/// Maps a genome and its evaluation seed to `(eval_accuracy, neuron_count)`.
pub trait Evaluator: Sync {
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<(f64, usize)>;
}

impl<F> Evaluator for F
where
    F: Fn(&Genome, u64) -> Result<(f64, usize)> + Sync,
{
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<(f64, usize)> {
        self(genome, seed)
    }
}

/// Runs the search. Every trace record is passed to `sink` as soon as its
/// generation is complete, so a failing evaluator leaves a partial trace.
pub fn evolve(
    cfg: &NasConfig,
    evaluator: &dyn Evaluator,
    sink: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> Result<NasOutcome> {
    cfg.validate()?;
    let mut ids = IdAlloc::default();
    let mut cache: HashMap<String, Fitness> = HashMap::new();
    let mut evaluated: BTreeMap<String, Genome> = BTreeMap::new();
    let mut trace = Vec::new();

    let mut pop: Vec<Individual> = (0..cfg.population)
        .map(|slot| random_genome(cfg, &mut slot_rng(cfg.seed, 0, slot), &mut ids).map(Individual::new))
        .collect::<Result<_>>()?;
    let mut elite_flags = vec![false; pop.len()];

    for generation in 0..cfg.generations.max(1) {
        if generation > 0 {
            let ranked = rank_order(&pop, cfg)?;
            let mut sel_rng = slot_rng(cfg.seed, generation, usize::MAX >> 32);
            let parents = select(&pop, cfg, &mut sel_rng)?;
            let mut next: Vec<Individual> = ranked[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();
            for slot in 0..cfg.population - cfg.elitism {
                let mut rng = slot_rng(cfg.seed, generation, slot);
                let a = *parents.choose(&mut rng).expect("parents are non-empty");
                let others: Vec<usize> = parents.iter().copied().filter(|&p| p != a).collect();
                let b = others.choose(&mut rng).copied().unwrap_or(a);
                next.push(recombine(&pop[a], &pop[b], cfg, &mut rng, &mut ids)?);
            }
            elite_flags = (0..next.len()).map(|i| i < cfg.elitism).collect();
            pop = next;
        }

        let hashes: Vec<String> = pop.iter().map(|i| i.genome.structure_hash()).collect();
        let todo: Vec<usize> = {
            let mut seen = BTreeSet::new();
            (0..pop.len())
                .filter(|&i| pop[i].genome.fitness.is_none() && !cache.contains_key(&hashes[i]) && seen.insert(&hashes[i]))
                .collect()
        };
        let results: Vec<(usize, Result<(f64, usize)>)> = todo
            .par_iter()
            .map(|&i| {
                let seed = slot_rng(cfg.seed ^ 0x5eed, generation, i).random::<u64>();
                (i, evaluator.evaluate(&pop[i].genome, seed))
            })
            .collect();
        let mut fresh = BTreeSet::new();
        for (i, r) in results {
            let (acc, neurons) = r.map_err(|e| match e {
                Error::Evaluator(m) => Error::Evaluator(m),
                other => Error::Evaluator(other.to_string()),
            })?;
            cache.insert(hashes[i].clone(), Fitness { eval_accuracy: acc, neuron_count: neurons });
            fresh.insert(i);
        }
        let mut records = Vec::with_capacity(pop.len());
        for (i, ind) in pop.iter_mut().enumerate() {
            let f = match ind.genome.fitness {
                Some(f) => f,
                None => cache[&hashes[i]],
            };
            ind.set_fitness(f, cfg);
            evaluated.entry(hashes[i].clone()).or_insert_with(|| ind.genome.clone());
            let (dims, edges) = ind.genome.canonical();
            records.push(TraceRecord {
                generation,
                slot: i,
                hash: hashes[i].clone(),
                dims,
                edges,
                sequential: ind.genome.is_sequential(),
                accuracy: f.eval_accuracy,
                neurons: f.neuron_count,
                elite: elite_flags[i],
                cached: !fresh.contains(&i),
            });
        }
        for r in &records {
            sink(r)?;
        }
        trace.extend(records);
    }

    let ranked = rank_order(&pop, cfg)?;
    let population: Vec<Individual> = ranked.iter().map(|&i| pop[i].clone()).collect();
    let best = evaluated
        .values()
        .max_by(|a, b| compare_fitness(&a.fitness.unwrap(), &b.fitness.unwrap(), cfg))
        .cloned()
        .expect("at least one evaluation");
    let pareto = pareto_front(&evaluated);
    Ok(NasOutcome { trace, population, best, pareto, evaluated })
}

/// Trainable network with the structure of a genome: every hidden node is a
/// ReLU layer fed by the sum of its incoming projections; the output node is
/// a softmax layer.
#[derive(Debug, Clone)]
pub struct DagModel {
    genome: Genome,
    order: Vec<NodeId>,
    /// `(out, in)` matrix per edge.
    weights: BTreeMap<(NodeId, NodeId), Array2<f64>>,
}

struct DagPass {
    pre: BTreeMap<NodeId, Array2<f64>>,
    act: BTreeMap<NodeId, Array2<f64>>,
}

impl DagModel {
    /// Glorot-uniform weights.
    pub fn new(genome: &Genome, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        let order = genome.topo_order();
        for &v in &order[1..] {
            let fan_in: usize = genome.edges().iter().filter(|e| e.1 == v).map(|e| genome.width(e.0).unwrap()).sum();
            let fan_out = genome.width(v).unwrap();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for &(a, b) in genome.edges().iter().filter(|e| e.1 == v) {
                let w = Array2::from_shape_simple_fn((fan_out, genome.width(a).unwrap()), || rng.random_range(-limit..limit));
                weights.insert((a, b), w);
            }
        }
        Self { genome: genome.clone(), order, weights }
    }

    pub fn genome(&self) -> &Genome {
        &self.genome
    }

    pub fn weights(&self) -> &BTreeMap<(NodeId, NodeId), Array2<f64>> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<(NodeId, NodeId), Array2<f64>> {
        &mut self.weights
    }

    fn forward(&self, x: Array2<f64>) -> DagPass {
        let n = x.nrows();
        let mut pre = BTreeMap::new();
        let mut act = BTreeMap::new();
        act.insert(INPUT, x);
        for &v in &self.order[1..] {
            let mut z = Array2::zeros((n, self.genome.width(v).unwrap()));
            for ((a, b), w) in &self.weights {
                if *b == v {
                    z += &act[a].dot(&w.t());
                }
            }
            let a = if v == OUTPUT { softmax_rows(&z) } else { z.mapv(|t| t.max(0.0)) };
            pre.insert(v, z);
            act.insert(v, a);
        }
        DagPass { pre, act }
    }

    /// Class probabilities.
    pub fn predict_proba(&self, x: Array2<f64>) -> Array2<f64> {
        self.forward(x).act.remove(&OUTPUT).expect("output node")
    }

    /// Mean cross-entropy and its gradient per edge.
    pub fn gradient(&self, x: Array2<f64>, labels: &[usize]) -> (f64, BTreeMap<(NodeId, NodeId), Array2<f64>>) {
        let n = x.nrows() as f64;
        let pass = self.forward(x);
        let p = &pass.act[&OUTPUT];
        let mut loss = 0.0;
        let mut d_out = p.clone();
        for (i, &y) in labels.iter().enumerate() {
            loss -= p[[i, y]].max(f64::MIN_POSITIVE).ln();
            d_out[[i, y]] -= 1.0;
        }
        d_out /= n;
        let mut deltas: BTreeMap<NodeId, Array2<f64>> = BTreeMap::new();
        deltas.insert(OUTPUT, d_out);
        let mut grads = BTreeMap::new();
        for &v in self.order[1..].iter().rev() {
            let Some(mut d) = deltas.remove(&v) else { continue };
            if v != OUTPUT {
                d.zip_mut_with(&pass.pre[&v], |dv, &z| {
                    if z <= 0.0 {
                        *dv = 0.0
                    }
                });
            }
            for ((a, b), w) in &self.weights {
                if *b != v {
                    continue;
                }
                grads.insert((*a, *b), d.t().dot(&pass.act[a]));
                if *a != INPUT {
                    let back = d.dot(w);
                    match deltas.get_mut(a) {
                        Some(acc) => *acc += &back,
                        None => {
                            deltas.insert(*a, back);
                        }
                    }
                }
            }
        }
        (loss / n, grads)
    }

    /// Mini-batch SGD on cross-entropy.
    pub fn train(&mut self, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if data.input_dim() != self.genome.input_dim {
            return Err(Error::Shape { expected: self.genome.input_dim, got: data.input_dim() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
                let (loss, grads) = self.gradient(batch_matrix(data, idx), &labels);
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, batch: b });
                }
                for (k, g) in grads {
                    self.weights.get_mut(&k).unwrap().scaled_add(-cfg.learning_rate, &g);
                }
                total += loss;
                batches += 1;
            }
            curve.push(total / batches.max(1) as f64);
        }
        Ok(curve)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.input_dim() != self.genome.input_dim {
            return Err(Error::Shape { expected: self.genome.input_dim, got: data.input_dim() });
        }
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(1000) {
            let p = self.predict_proba(batch_matrix(data, chunk));
            for (row, &i) in p.rows().into_iter().zip(chunk) {
                if argmax(&row.to_vec()).0 == data.label(i) {
                    hits += 1;
                }
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Equivalent layered model; only sequential genomes qualify.
    pub fn to_ann_model(&self) -> Result<AnnModel> {
        if !self.genome.is_sequential() {
            return Err(Error::Config("only sequential genomes map onto a layered model".into()));
        }
        let order = &self.order;
        let weights = order.windows(2).map(|p| self.weights[&(p[0], p[1])].clone()).collect();
        AnnModel::from_weights(weights, OutputHead::Softmax, LossKind::CrossEntropy, false)
    }
}

/// Trains each genome briefly and scores it on held-out data.
pub struct TrainingEvaluator<'a> {
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    pub cfg: TrainConfig,
}

impl Evaluator for TrainingEvaluator<'_> {
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<(f64, usize)> {
        let mut model = DagModel::new(genome, seed);
        let cfg = TrainConfig { rng_seed: seed, ..self.cfg.clone() };
        model.train(self.train, &cfg).map_err(|e| Error::Evaluator(e.to_string()))?;
        Ok((model.accuracy(self.eval)?, genome.neuron_count()))
    }
}
