//! Island-model evolution: parent sampling, non-dominated selection,
//! MAP-Elites archive, migration, random immigrants and constraint memory.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::contract::{execution_key, Contract, Evaluation, Evaluator, GateName, Stage};
use crate::error::{Error, Result};
use crate::genome::{
    crossover, mutate, random_genome, sample_operator, validate, Genome, GenomeId, ModelFamily, OperatorKind, Origin,
};
use crate::metrics::{Fitness, MetricBundle};
use crate::rng::{derive_seed, DeterministicStream};
use crate::taskbench::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Adaptive,
    Topk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub islands: usize,
    pub population: usize,
    pub generations: u32,
    pub migration_interval: u32,
    pub migration_count: usize,
    pub immigrant_rate: f64,
    pub sampling: SamplingMode,
    pub initial_temperature: f64,
    pub temperature_decay: f64,
    pub top_k: usize,
    pub feedback: bool,
    pub memory_decay: f64,
    pub crossover_rate: f64,
    pub elite_count: usize,
    /// Generation fractions at which refine and certify begin.
    pub refine_at: f64,
    pub certify_at: f64,
    pub archive_bins: usize,
    /// Set by the experiment from its master seed, never read from config.
    #[serde(skip)]
    pub master_seed: u64,
    /// Worker threads for candidate evaluation; 1 runs inline.
    pub threads: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            islands: 3,
            population: 8,
            generations: 50,
            migration_interval: 10,
            migration_count: 1,
            immigrant_rate: 0.05,
            sampling: SamplingMode::Adaptive,
            initial_temperature: 1.0,
            temperature_decay: 0.97,
            top_k: 2,
            feedback: true,
            memory_decay: 0.95,
            crossover_rate: 0.2,
            elite_count: 2,
            refine_at: 0.5,
            certify_at: 0.85,
            archive_bins: 8,
            master_seed: 0,
            threads: 1,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("islands", self.islands),
            ("population", self.population),
            ("generations", self.generations as usize),
            ("migration_interval", self.migration_interval as usize),
            ("migration_count", self.migration_count),
            ("top_k", self.top_k),
            ("archive_bins", self.archive_bins),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be >= 1")));
        }
        let rates = [
            ("immigrant_rate", self.immigrant_rate),
            ("crossover_rate", self.crossover_rate),
            ("memory_decay", self.memory_decay),
            ("temperature_decay", self.temperature_decay),
            ("refine_at", self.refine_at),
            ("certify_at", self.certify_at),
        ];
        if let Some((name, _)) = rates.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Error::Spec(format!("{name} must lie in [0, 1]")));
        }
        if !(self.initial_temperature > 0.0) {
            return Err(Error::Spec("initial_temperature must be > 0".into()));
        }
        if self.refine_at > self.certify_at {
            return Err(Error::Spec("refine_at must not exceed certify_at".into()));
        }
        if self.elite_count > self.population {
            return Err(Error::Spec("elite_count must not exceed population".into()));
        }
        Ok(())
    }

    pub fn temperature(&self, generation: u32) -> f64 {
        self.initial_temperature * self.temperature_decay.powi(generation as i32)
    }

    pub fn stage(&self, generation: u32) -> Stage {
        let f = generation as f64 / self.generations as f64;
        if f >= self.certify_at {
            Stage::Certify
        } else if f >= self.refine_at {
            Stage::Refine
        } else {
            Stage::Explore
        }
    }

    pub fn total_evaluations(&self) -> usize {
        self.islands * self.population * self.generations as usize
    }
}

/// An evaluated candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub genome: Genome,
    pub evaluation: Evaluation,
    /// Island on which the candidate was evaluated.
    pub home_island: usize,
}

impl Member {
    pub fn id(&self) -> &GenomeId {
        self.genome.id()
    }

    pub fn fitness(&self) -> Fitness {
        self.evaluation.fitness_marker()
    }

    pub fn accepted(&self) -> bool {
        !self.evaluation.rejected
    }

    /// Objectives, all maximized: ρ̄, reliability, −parameter count.
    pub fn objectives(&self) -> [f64; 3] {
        [
            self.evaluation.aggregate.spearman_rho,
            self.evaluation.reliability,
            -(self.evaluation.param_count as f64),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct IslandState {
    pub id: usize,
    pub population: Vec<Member>,
    pub elites: Vec<GenomeId>,
    /// Offspring awaiting evaluation.
    pub pending: Vec<Genome>,
    pub rng: DeterministicStream,
    pub generation: u32,
}

impl IslandState {
    pub fn is_elite(&self, id: &GenomeId) -> bool {
        self.elites.contains(id)
    }

    pub fn best(&self) -> Option<&Member> {
        self.population
            .iter()
            .filter(|m| m.accepted())
            .max_by(|a, b| a.fitness().cmp(&b.fitness()).then_with(|| b.id().cmp(a.id())))
    }
}

/// `a` dominates `b` (all objectives maximized).
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x >= y) && a.iter().zip(b).any(|(x, y)| x > y)
}

/// Fast non-dominated sort. Returns fronts of indices, each sorted ascending.
pub fn nondominated_sort(objectives: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = objectives.len();
    let mut dominated_by = vec![Vec::new(); n];
    let mut counts = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dominates(&objectives[i], &objectives[j]) {
                dominated_by[i].push(j);
            } else if i != j && dominates(&objectives[j], &objectives[i]) {
                counts[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| counts[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                counts[j] -= 1;
                if counts[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Orders members for survival: accepted by (front rank, −F, id), then
/// rejected by id.
pub fn rank_members(members: &[Member]) -> Vec<usize> {
    let accepted: Vec<usize> = (0..members.len()).filter(|&i| members[i].accepted()).collect();
    let objs: Vec<Vec<f64>> = accepted.iter().map(|&i| members[i].objectives().to_vec()).collect();
    let mut rank = vec![usize::MAX; members.len()];
    for (r, front) in nondominated_sort(&objs).iter().enumerate() {
        for &k in front {
            rank[accepted[k]] = r;
        }
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        rank[a]
            .cmp(&rank[b])
            .then_with(|| members[b].fitness().cmp(&members[a].fitness()))
            .then_with(|| members[a].id().cmp(members[b].id()))
    });
    order
}

/// Keeps `size` distinct members from `pool` in survival order. Members
/// that would execute identically to a better-ranked one only fill slots
/// left over once every distinct execution is kept.
pub fn select_survivors(pool: Vec<Member>, size: usize) -> Vec<Member> {
    let mut seen = HashSet::new();
    let mut unique = Vec::with_capacity(pool.len());
    for m in pool {
        if seen.insert(m.id().clone()) {
            unique.push(m);
        }
    }
    let order = rank_members(&unique);
    let mut keys = HashSet::new();
    let mut tiered: Vec<(u8, usize)> = order
        .into_iter()
        .map(|i| match (unique[i].accepted(), keys.insert(execution_key(&unique[i].genome))) {
            (true, true) => (0, i),
            (true, false) => (1, i),
            (false, _) => (2, i),
        })
        .collect();
    tiered.sort_by_key(|&(tier, _)| tier);
    let mut slots: Vec<Option<Member>> = unique.into_iter().map(Some).collect();
    tiered
        .into_iter()
        .map(|(_, i)| i)
        .take(size)
        .map(|i| slots[i].take().expect("each index once"))
        .collect()
}

/// The `k` highest-fitness accepted members, ties broken by id.
pub fn top_k(pop: &[Member], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].accepted()).collect();
    idx.sort_by(|&a, &b| pop[b].fitness().cmp(&pop[a].fitness()).then_with(|| pop[a].id().cmp(pop[b].id())));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParentDraw {
    pub parents: Vec<usize>,
    /// No accepted member existed; parents were drawn uniformly.
    pub fallback: bool,
}

/// Draws `count` parent indices from `pop`.
///
/// Adaptive mode samples accepted members with probability ∝ exp(F/T); topk
/// mode draws uniformly among the [`top_k`] members.
/// Population standard deviation of fitness, 1 when degenerate. Temperature
/// is measured in these units.
fn fitness_spread(f: &[f64]) -> f64 {
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 1e-12 { sd } else { 1.0 }
}

pub fn select_parents(pop: &[Member], mode: SamplingMode, temperature: f64, k: usize, count: usize, rng: &mut DeterministicStream) -> ParentDraw {
    let accepted: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].accepted()).collect();
    if accepted.is_empty() {
        return ParentDraw {
            parents: (0..count).map(|_| rng.index(pop.len())).collect(),
            fallback: true,
        };
    }
    let parents = match mode {
        SamplingMode::Topk => {
            let top = top_k(pop, k);
            (0..count).map(|_| top[rng.index(top.len())]).collect()
        }
        SamplingMode::Adaptive => {
            let f: Vec<f64> = accepted.iter().map(|&i| pop[i].fitness().value().unwrap_or(0.0)).collect();
            let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let scale = fitness_spread(&f);
            let weights: Vec<f64> = f.iter().map(|v| ((v - max) / (temperature * scale)).exp()).collect();
            (0..count).map(|_| accepted[rng.weighted_index(&weights)]).collect()
        }
    };
    ParentDraw {
        parents,
        fallback: false,
    }
}

/// Decayed (operator kind, failed gate) counts.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ConstraintMemory {
    counts: BTreeMap<(OperatorKind, GateName), f64>,
    decay: f64,
}

/// Lowest weight any operator kind can receive: 5% of uniform.
pub const OPERATOR_WEIGHT_FLOOR: f64 = 0.05 / 4.0;

impl ConstraintMemory {
    pub fn new(decay: f64) -> Self {
        Self {
            counts: BTreeMap::new(),
            decay,
        }
    }

    pub fn record_failure(&mut self, kind: OperatorKind, gate: GateName) {
        *self.counts.entry((kind, gate)).or_insert(0.0) += 1.0;
    }

    /// One generation of exponential decay.
    pub fn decay_step(&mut self) {
        for v in self.counts.values_mut() {
            *v *= self.decay;
        }
    }

    pub fn count(&self, kind: OperatorKind, gate: GateName) -> f64 {
        self.counts.get(&(kind, gate)).copied().unwrap_or(0.0)
    }

    pub fn kind_total(&self, kind: OperatorKind) -> f64 {
        self.counts.iter().filter(|((k, _), _)| *k == kind).map(|(_, v)| v).sum()
    }

    /// Weights indexed like [`OperatorKind::ALL`]: uniform scaled by
    /// `1 − c_k / (1 + Σc)`, floored, renormalized.
    pub fn operator_weights(&self) -> [f64; 4] {
        let totals = OperatorKind::ALL.map(|k| self.kind_total(k));
        let sum: f64 = totals.iter().sum();
        let mut w = totals.map(|c| (0.25 * (1.0 - c / (1.0 + sum))).max(OPERATOR_WEIGHT_FLOOR));
        let norm: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= norm);
        w
    }
}

/// Behavior descriptor cell of an accepted evaluation.
pub fn descriptor(e: &Evaluation, bins: usize) -> (usize, usize) {
    let bin = |v: u64, span: f64| {
        let l = (v.max(1) as f64).log2();
        ((l * bins as f64 / span).floor() as usize).min(bins - 1)
    };
    (bin(e.param_count as u64, 12.0), bin(e.inference_macs, 14.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchiveCell {
    pub complexity_bin: usize,
    pub latency_bin: usize,
    pub genome: Genome,
    pub fitness: f64,
    pub combined_score: f64,
    pub generation: u32,
}

/// MAP-Elites grid over (complexity bin, latency bin).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Archive {
    pub bins: usize,
    pub cells: BTreeMap<(usize, usize), ArchiveCell>,
}

impl Archive {
    pub fn new(bins: usize) -> Self {
        Self {
            bins,
            cells: BTreeMap::new(),
        }
    }

    /// Inserts an accepted candidate with non-negative fitness when its cell
    /// is empty or it strictly improves the incumbent.
    pub fn insert(&mut self, m: &Member, generation: u32) -> bool {
        let Some(f) = m.fitness().value() else {
            return false;
        };
        if f < 0.0 {
            return false;
        }
        let key = descriptor(&m.evaluation, self.bins);
        if self.cells.get(&key).is_some_and(|c| f <= c.fitness) {
            return false;
        }
        self.cells.insert(
            key,
            ArchiveCell {
                complexity_bin: key.0,
                latency_bin: key.1,
                genome: m.genome.clone(),
                fitness: f,
                combined_score: m.evaluation.combined_score(),
                generation,
            },
        );
        true
    }

    pub fn qd_score(&self) -> f64 {
        self.cells.values().map(|c| c.fitness).sum()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Row-major `bins × bins` grid of optional cells.
    pub fn grid(&self) -> Vec<Vec<Option<&ArchiveCell>>> {
        (0..self.bins)
            .map(|r| (0..self.bins).map(|c| self.cells.get(&(r, c))).collect())
            .collect()
    }

    pub fn to_json(&self) -> String {
        let grid = self.grid();
        serde_json::to_string_pretty(&serde_json::json!({
            "bins": self.bins,
            "qd_score": self.qd_score(),
            "grid": grid,
        }))
        .expect("archive serializes")
    }
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub candidate_id: GenomeId,
    pub parent_id: Option<GenomeId>,
    pub second_parent_id: Option<GenomeId>,
    pub iteration: u64,
    pub generation: u32,
    pub island: usize,
    /// Island the (first) parent was evaluated on.
    pub parent_island: Option<usize>,
    /// The parent arrived on this island by migration.
    pub migrated_parent: bool,
    pub operator: String,
    pub stage: Stage,
    pub gate_outcome: String,
    pub score: f64,
    pub fitness: Option<f64>,
    pub metrics: MetricBundle,
    pub reliability: f64,
    pub param_count: usize,
    pub failure_rate: f64,
    pub genome: Genome,
}

impl TrajectoryRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub generation: u32,
    pub island: usize,
    pub stage: Stage,
    pub best_score: f64,
    pub mean_score: f64,
    pub best_fitness: Option<f64>,
    pub accepted: usize,
    pub evaluated: usize,
    pub qd_score: f64,
    pub operator_weights: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MigrationEvent {
    pub generation: u32,
    pub from: usize,
    pub to: usize,
    pub genome_id: GenomeId,
}

#[derive(Debug, Clone)]
pub struct EvolutionResult {
    pub islands: Vec<IslandState>,
    pub archive: Archive,
    pub trajectory: Vec<TrajectoryRecord>,
    pub summaries: Vec<GenerationSummary>,
    pub migrations: Vec<MigrationEvent>,
    /// QD score after each generation.
    pub qd_history: Vec<f64>,
    /// Operator weights in force during each generation's variation.
    pub weight_history: Vec<[f64; 4]>,
    pub best: Option<Member>,
    /// Highest combined score among accepted candidates.
    pub best_score: f64,
    /// Parent draws that fell back to uniform sampling.
    pub fallback_draws: usize,
}

impl EvolutionResult {
    pub fn trajectory_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.trajectory {
            out.push_str(&r.to_json());
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "generation",
            "island",
            "stage",
            "best_score",
            "mean_score",
            "best_fitness",
            "accepted",
            "evaluated",
            "qd_score",
        ])?;
        for s in &self.summaries {
            w.write_record([
                s.generation.to_string(),
                s.island.to_string(),
                s.stage.as_str().to_string(),
                format!("{:.6}", s.best_score),
                format!("{:.6}", s.mean_score),
                s.best_fitness.map(|f| format!("{f:.6}")).unwrap_or_default(),
                s.accepted.to_string(),
                s.evaluated.to_string(),
                format!("{:.6}", s.qd_score),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

const ISLAND_STREAM: u64 = 0x6973_6c61;

/// Seeds each island with random genomes cycling through the model families.
pub fn initialize(config: &EvolutionConfig, ds: &Dataset) -> Vec<IslandState> {
    let n = ds.n_columns();
    (0..config.islands)
        .map(|id| {
            let mut rng = DeterministicStream::new(derive_seed(config.master_seed, ISLAND_STREAM + id as u64));
            let mut pending = Vec::with_capacity(config.population);
            for family in ModelFamily::ALL.iter().cycle().take(config.population) {
                let g = random_genome(*family, n, &mut rng, Origin::Initial);
                debug_assert!(validate(&g).is_valid());
                pending.push(g);
            }
            IslandState {
                id,
                population: Vec::new(),
                elites: Vec::new(),
                pending,
                rng,
                generation: 0,
            }
        })
        .collect()
}

/// Ring migration: island i sends copies of its top `count` accepted
/// members to island (i+1) mod n, where they replace the lowest-ranked
/// members. Returns the moves made.
pub fn migrate(islands: &mut [IslandState], count: usize, generation: u32) -> Vec<MigrationEvent> {
    let n = islands.len();
    if n < 2 {
        return Vec::new();
    }
    let payloads: Vec<Vec<Member>> = islands
        .iter()
        .map(|isl| top_k(&isl.population, count).into_iter().map(|i| isl.population[i].clone()).collect())
        .collect();
    let mut events = Vec::new();
    for (from, payload) in payloads.into_iter().enumerate() {
        let to = (from + 1) % n;
        let dest = &mut islands[to];
        for m in payload {
            if dest.population.iter().any(|x| x.id() == m.id()) {
                continue;
            }
            let order = rank_members(&dest.population);
            let Some(&worst) = order.last() else {
                continue;
            };
            events.push(MigrationEvent {
                generation,
                from,
                to,
                genome_id: m.id().clone(),
            });
            dest.population[worst] = m;
        }
        dest.elites = top_k(&dest.population, dest.elites.len().max(1))
            .into_iter()
            .map(|i| dest.population[i].id().clone())
            .collect();
    }
    events
}

/// With probability `rate`, replaces one pending offspring by a fresh
/// random genome. Evaluated members (and so elites) are never touched.
pub fn inject_immigrants(island: &mut IslandState, rate: f64, n_features: usize, iteration: u64, generation: u32) -> bool {
    if island.pending.is_empty() || !island.rng.bernoulli(rate) {
        return false;
    }
    let slot = island.rng.index(island.pending.len());
    let family = ModelFamily::ALL[island.rng.index(ModelFamily::ALL.len())];
    let mut g = random_genome(family, n_features, &mut island.rng, Origin::Immigrant);
    g.provenance.iteration = iteration + slot as u64 + 1;
    g.provenance.generation = generation;
    island.pending[slot] = g;
    true
}

/// Fills `island.pending` with `population` offspring.
fn variate(island: &mut IslandState, config: &EvolutionConfig, weights: &[f64; 4], generation: u32, iteration: u64) -> usize {
    let temperature = config.temperature(generation);
    let mut fallbacks = 0;
    let mut pending = Vec::with_capacity(config.population);
    for slot in 0..config.population {
        let it = iteration + slot as u64 + 1;
        let accepted = island.population.iter().filter(|m| m.accepted()).count();
        let rng = &mut island.rng;
        let child = if accepted >= 2 && rng.bernoulli(config.crossover_rate) {
            let draw = select_parents(&island.population, config.sampling, temperature, config.top_k, 2, rng);
            let (a, b) = (&island.population[draw.parents[0]], &island.population[draw.parents[1]]);
            crossover(&a.genome, &b.genome, rng, it, generation)
        } else {
            let draw = select_parents(&island.population, config.sampling, temperature, config.top_k, 1, rng);
            if draw.fallback {
                fallbacks += 1;
            }
            let kind = sample_operator(weights, rng);
            mutate(&island.population[draw.parents[0]].genome, kind, rng, it, generation)
        };
        pending.push(child);
    }
    island.pending = pending;
    fallbacks
}

fn evaluate_batch(evaluator: &Evaluator, batch: &[Genome], contract: &Contract, threads: usize) -> Result<Vec<Evaluation>> {
    if threads <= 1 {
        return batch.iter().map(|g| evaluator.evaluate(g, contract)).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    pool.install(|| batch.par_iter().map(|g| evaluator.evaluate(g, contract)).collect())
}

/// Runs the full generational loop. Generation 0 evaluates the initial
/// populations; every later generation evaluates one offspring batch per
/// island, so the run performs exactly `islands × population × generations`
/// evaluations.
pub fn run_evolution(config: &EvolutionConfig, evaluator: &Evaluator, contract: &Contract) -> Result<EvolutionResult> {
    config.validate()?;
    contract.validate()?;
    let ds = evaluator.dataset();
    let mut islands = initialize(config, ds);
    let mut memory = ConstraintMemory::new(config.memory_decay);
    let mut archive = Archive::new(config.archive_bins);
    let mut trajectory: Vec<TrajectoryRecord> = Vec::with_capacity(config.total_evaluations());
    let mut summaries = Vec::new();
    let mut migrations = Vec::new();
    let mut qd_history = Vec::new();
    let mut weight_history = Vec::new();
    let mut best: Option<Member> = None;
    let mut best_score = 0.0f64;
    let mut fallback_draws = 0;
    let mut iteration = 0u64;
    let n_features = ds.n_columns();

    for generation in 0..config.generations {
        let stage = config.stage(generation);
        let gate_contract = contract.tighten(stage);
        let weights = if config.feedback {
            memory.operator_weights()
        } else {
            [0.25; 4]
        };
        weight_history.push(weights);

        if generation > 0 {
            if config.islands > 1 && generation % config.migration_interval == 0 {
                migrations.extend(migrate(&mut islands, config.migration_count, generation));
            }
            let mut it = iteration;
            for isl in islands.iter_mut() {
                fallback_draws += variate(isl, config, &weights, generation, it);
                inject_immigrants(isl, config.immigrant_rate, n_features, it, generation);
                it += isl.pending.len() as u64;
            }
        }

        let batch: Vec<Genome> = islands.iter().flat_map(|i| i.pending.iter().cloned()).collect();
        let evals = evaluate_batch(evaluator, &batch, &gate_contract, config.threads)?;
        let mut evals = evals.into_iter();
        let before_qd = archive.qd_score();

        for isl in islands.iter_mut() {
            let pending = std::mem::take(&mut isl.pending);
            let mut offspring = Vec::with_capacity(pending.len());
            for g in pending {
                let ev = evals.next().expect("one evaluation per candidate");
                iteration += 1;
                let parent = g.provenance.parent.as_ref().and_then(|pid| {
                    isl.population.iter().find(|m| m.id() == pid)
                });
                let parent_island = parent.map(|p| p.home_island);
                if let (Some(kind), Some(gate)) = (g.provenance.origin.operator(), ev.failed_gate) {
                    if config.feedback {
                        memory.record_failure(kind, gate);
                    }
                }
                trajectory.push(TrajectoryRecord {
                    candidate_id: g.id().clone(),
                    parent_id: g.provenance.parent.clone(),
                    second_parent_id: g.provenance.second_parent.clone(),
                    iteration,
                    generation,
                    island: isl.id,
                    parent_island,
                    migrated_parent: parent_island.is_some_and(|p| p != isl.id),
                    operator: g.provenance.origin.label().to_string(),
                    stage,
                    gate_outcome: ev.failed_gate.map_or("pass", |gname| gname.as_str()).to_string(),
                    score: ev.combined_score(),
                    fitness: ev.fitness,
                    metrics: ev.aggregate,
                    reliability: ev.reliability,
                    param_count: ev.param_count,
                    failure_rate: ev.failure_rate,
                    genome: g.clone(),
                });
                let member = Member {
                    genome: g,
                    evaluation: ev,
                    home_island: isl.id,
                };
                if member.accepted() {
                    best_score = best_score.max(member.evaluation.combined_score());
                    let better = best.as_ref().is_none_or(|b| member.fitness() > b.fitness());
                    if better {
                        best = Some(member.clone());
                    }
                    archive.insert(&member, generation);
                }
                offspring.push(member);
            }
            let evaluated = offspring.len();
            let scores: Vec<f64> = offspring.iter().map(|m| m.evaluation.combined_score()).collect();
            let accepted = offspring.iter().filter(|m| m.accepted()).count();
            let mut pool = std::mem::take(&mut isl.population);
            pool.extend(offspring);
            isl.population = select_survivors(pool, config.population);
            isl.elites = top_k(&isl.population, config.elite_count)
                .into_iter()
                .map(|i| isl.population[i].id().clone())
                .collect();
            isl.generation = generation + 1;
            summaries.push(GenerationSummary {
                generation,
                island: isl.id,
                stage,
                best_score: scores.iter().copied().fold(0.0, f64::max),
                mean_score: scores.iter().sum::<f64>() / evaluated.max(1) as f64,
                best_fitness: isl.best().and_then(|m| m.fitness().value()),
                accepted,
                evaluated,
                qd_score: archive.qd_score(),
                operator_weights: weights,
            });
        }
        let qd = archive.qd_score();
        debug_assert!(qd >= before_qd);
        qd_history.push(qd);
        memory.decay_step();
    }

    Ok(EvolutionResult {
        islands,
        archive,
        trajectory,
        summaries,
        migrations,
        qd_history,
        weight_history,
        best,
        best_score,
        fallback_draws,
    })
}

/// Best-so-far combined score after each evaluation.
pub fn best_so_far(trajectory: &[TrajectoryRecord]) -> Vec<f64> {
    let mut best = 0.0f64;
    trajectory
        .iter()
        .map(|r| {
            best = best.max(r.score);
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::{PhenotypeRunner, Stage};
    use crate::taskbench::{generate, TaskSpec};

    fn fake(id_seed: u64, rho: f64, rel: f64, params: usize, rejected: bool) -> Member {
        let mut rng = DeterministicStream::new(id_seed);
        let g = random_genome(ModelFamily::RidgeLinear, 6, &mut rng, Origin::Initial);
        let fitness = (!rejected).then(|| rho + 0.5 * rel - 0.1 * params as f64 / 1e4);
        Member {
            evaluation: Evaluation {
                genome_id: g.id().clone(),
                stage: Stage::Explore,
                gates: vec![],
                failed_gate: rejected.then_some(GateName::Leakage),
                rejected,
                executed: !rejected,
                per_seed: vec![],
                aggregate: MetricBundle {
                    spearman_rho: rho,
                    combined_score: rho,
                    ..MetricBundle::default()
                },
                reliability: rel,
                fitness,
                param_count: params,
                estimated_macs: 0,
                inference_macs: params as u64,
                failure_rate: 0.0,
            },
            genome: g,
            home_island: 0,
        }
    }

    #[test]
    fn dominance_fronts() {
        let fronts = nondominated_sort(&[vec![1.0, 1.0], vec![0.0, 0.0]]);
        assert_eq!(fronts, vec![vec![0], vec![1]]);
        assert_eq!(nondominated_sort(&[vec![0.3, 0.1]]), vec![vec![0]]);
        let fronts = nondominated_sort(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![0.0, 0.0]]);
        assert_eq!(fronts, vec![vec![0, 1, 2], vec![3]]);
    }

    #[test]
    fn topk_picks_highest() {
        let pop = vec![fake(1, 0.9, 1.0, 0, false), fake(2, 0.4, 1.0, 0, false), fake(3, 0.7, 1.0, 0, false)];
        assert_eq!(top_k(&pop, 2), vec![0, 2]);
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let pop = vec![fake(1, 0.9, 1.0, 0, false), fake(2, 0.8, 1.0, 0, false), fake(3, 0.7, 1.0, 0, false)];
        let mut rng = DeterministicStream::new(4);
        let d = select_parents(&pop, SamplingMode::Adaptive, 0.01, 2, 1000, &mut rng);
        assert!(d.parents.iter().filter(|&&i| i == 0).count() >= 990);
    }

    #[test]
    fn high_temperature_is_near_uniform() {
        let pop: Vec<Member> = (0..4).map(|i| fake(i, 0.5, 1.0, 0, false)).collect();
        let mut rng = DeterministicStream::new(9);
        let d = select_parents(&pop, SamplingMode::Adaptive, 1e6, 2, 1000, &mut rng);
        for i in 0..4 {
            let c = d.parents.iter().filter(|&&p| p == i).count();
            assert!((200..=300).contains(&c), "{c}");
        }
    }

    #[test]
    fn rejected_never_sampled_when_alternatives_exist() {
        let pop = vec![fake(1, 0.1, 1.0, 0, false), fake(2, 0.9, 1.0, 0, true)];
        let mut rng = DeterministicStream::new(1);
        let d = select_parents(&pop, SamplingMode::Adaptive, 1e6, 2, 200, &mut rng);
        assert!(d.parents.iter().all(|&i| i == 0));
        let all_rejected = vec![fake(2, 0.9, 1.0, 0, true)];
        assert!(select_parents(&all_rejected, SamplingMode::Topk, 1.0, 2, 3, &mut rng).fallback);
    }

    #[test]
    fn memory_weights() {
        let mut m = ConstraintMemory::new(0.95);
        assert_eq!(m.operator_weights(), [0.25; 4]);
        for _ in 0..10 {
            m.record_failure(OperatorKind::SplitGuard, GateName::Split);
        }
        let w = m.operator_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[3] < w[0] && w[3] < w[1] && w[3] < w[2]);
        assert!(w.iter().all(|v| *v >= OPERATOR_WEIGHT_FLOOR));
        for _ in 0..200 {
            m.decay_step();
        }
        assert!(m.operator_weights().iter().all(|v| (v - 0.25).abs() < 1e-3));
    }

    #[test]
    fn archive_replacement_is_strict() {
        let mut a = Archive::new(8);
        let m = fake(1, 0.5, 1.0, 10, false);
        assert!(a.insert(&m, 0));
        assert!(!a.insert(&m, 1));
        assert!(!a.insert(&fake(2, 0.5, 1.0, 10, true), 1));
        assert_eq!(a.qd_score(), m.fitness().value().unwrap());
    }

    #[test]
    fn qd_of_two_cells() {
        let mut a = Archive::new(8);
        a.insert(&fake(1, 0.0, 1.0, 1, false), 0);
        a.insert(&fake(2, 0.2, 1.0, 4000, false), 0);
        assert_eq!(a.len(), 2);
        let expect = (0.5 - 0.1 / 1e4) + (0.7 - 0.1 * 0.4);
        assert!((a.qd_score() - expect).abs() < 1e-12);
    }

    fn island(id: usize, members: Vec<Member>) -> IslandState {
        let elites = top_k(&members, 1).into_iter().map(|i| members[i].id().clone()).collect();
        IslandState {
            id,
            population: members,
            elites,
            pending: vec![],
            rng: DeterministicStream::new(id as u64),
            generation: 0,
        }
    }

    #[test]
    fn ring_migration_moves_one_copy_per_island() {
        let mut isl: Vec<IslandState> = (0..3)
            .map(|i| island(i, (0..4).map(|j| fake(10 * i as u64 + j, 0.1 * j as f64, 1.0, 0, false)).collect()))
            .collect();
        let ev = migrate(&mut isl, 1, 10);
        assert_eq!(ev.len(), 3);
        assert!(isl.iter().all(|i| i.population.len() == 4));
        assert_eq!((ev[0].from, ev[0].to), (0, 1));
        assert_eq!((ev[2].from, ev[2].to), (2, 0));
        let mut single = vec![island(0, vec![fake(1, 0.5, 1.0, 0, false)])];
        assert!(migrate(&mut single, 1, 10).is_empty());
    }

    #[test]
    fn immigrant_rates() {
        let mut rng = DeterministicStream::new(3);
        let pending: Vec<Genome> = (0..4).map(|_| random_genome(ModelFamily::Mlp1Hidden, 6, &mut rng, Origin::Initial)).collect();
        let mut isl = island(0, vec![fake(1, 0.5, 1.0, 0, false)]);
        isl.pending = pending.clone();
        assert!(!inject_immigrants(&mut isl, 0.0, 6, 0, 1));
        assert_eq!(isl.pending, pending);
        let elite_before = isl.population.clone();
        assert!(inject_immigrants(&mut isl, 1.0, 6, 0, 1));
        let replaced = isl.pending.iter().zip(&pending).filter(|(a, b)| a != b).count();
        assert_eq!(replaced, 1);
        assert_eq!(isl.population, elite_before);
    }

    #[test]
    fn stage_schedule_and_temperature() {
        let c = EvolutionConfig::default();
        assert_eq!(c.stage(0), Stage::Explore);
        assert_eq!(c.stage(24), Stage::Explore);
        assert_eq!(c.stage(25), Stage::Refine);
        assert_eq!(c.stage(43), Stage::Certify);
        assert!((c.temperature(2) - 0.97f64.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn initial_islands_cover_all_families() {
        let ds = generate(&TaskSpec::default()).unwrap();
        let c = EvolutionConfig::default();
        let isl = initialize(&c, &ds);
        assert_eq!(isl.iter().map(|i| i.pending.len()).sum::<usize>(), 24);
        for i in &isl {
            for f in ModelFamily::ALL {
                assert!(i.pending.iter().any(|g| g.model().family() == f));
            }
            assert!(i.pending.iter().all(|g| validate(g).is_valid()));
        }
        let again = initialize(&c, &ds);
        assert!(isl.iter().zip(&again).all(|(a, b)| a.pending == b.pending));
    }

    #[test]
    fn tiny_run_counts_records() {
        let ds = generate(&TaskSpec::default()).unwrap();
        let c = EvolutionConfig {
            islands: 1,
            population: 3,
            generations: 1,
            ..EvolutionConfig::default()
        };
        let ev = Evaluator::new(&ds, &PhenotypeRunner);
        let r = run_evolution(&c, &ev, &Contract::default()).unwrap();
        assert_eq!(r.trajectory.len(), 3);
        assert!(r.trajectory.iter().all(|t| t.generation == 0));
        assert_eq!(r.trajectory.iter().map(|t| t.iteration).collect::<Vec<_>>(), vec![1, 2, 3]);
    }
}
