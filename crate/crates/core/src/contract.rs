//! Hard evaluation contract and the candidate-evaluation harness.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genome::{canonical_json, Genome, GenomeId, ModelSpec, SplitPolicy};
use crate::metrics::{self, round6, FitnessWeights, MetricBundle, ScoreWeights};
use crate::phenotype::{self, RunResult, RunStatus};
use crate::taskbench::{evaluation_split, Dataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Explore,
    Refine,
    Certify,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Explore, Stage::Refine, Stage::Certify];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Explore => "explore",
            Stage::Refine => "refine",
            Stage::Certify => "certify",
        }
    }
}

/// Limits applied by the statistical and resource gates in one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageLimits {
    pub sigma_limit: f64,
    pub budget: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub explore: StageLimits,
    pub refine: StageLimits,
    pub certify: StageLimits,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            explore: StageLimits {
                sigma_limit: 0.10,
                budget: 1_000_000_000,
            },
            refine: StageLimits {
                sigma_limit: 0.05,
                budget: 500_000_000,
            },
            certify: StageLimits {
                sigma_limit: 0.02,
                budget: 200_000_000,
            },
        }
    }
}

impl StageSchedule {
    pub fn limits(&self, stage: Stage) -> StageLimits {
        match stage {
            Stage::Explore => self.explore,
            Stage::Refine => self.refine,
            Stage::Certify => self.certify,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [e, r, c] = [self.explore, self.refine, self.certify];
        if [e, r, c].iter().any(|l| l.budget == 0 || !(l.sigma_limit >= 0.0)) {
            return Err(Error::Spec("stage budgets must be > 0 and sigma limits >= 0".into()));
        }
        if !(e.sigma_limit >= r.sigma_limit && r.sigma_limit >= c.sigma_limit && e.budget >= r.budget && r.budget >= c.budget) {
            return Err(Error::Spec("stage limits must tighten from explore to refine to certify".into()));
        }
        Ok(())
    }
}

/// The gate set. Values are immutable once built; [`Contract::tighten`]
/// returns a new contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Contract {
    pub seeds: Vec<u64>,
    pub folds: usize,
    /// Seed for the fold assignment of non-holdout families.
    pub split_seed: u64,
    pub stage: Stage,
    pub schedule: StageSchedule,
    pub leakage_gate: bool,
    /// Extra banned columns on top of the dataset card's leaky columns.
    pub banned_columns: Vec<usize>,
    pub allow_random_split: bool,
    pub score_weights: ScoreWeights,
    pub fitness_weights: FitnessWeights,
}

impl Default for Contract {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            folds: 3,
            split_seed: 0,
            stage: Stage::Explore,
            schedule: StageSchedule::default(),
            leakage_gate: true,
            banned_columns: Vec::new(),
            allow_random_split: false,
            score_weights: ScoreWeights::default(),
            fitness_weights: FitnessWeights::default(),
        }
    }
}

impl Contract {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < 2 {
            return Err(Error::Spec("contract needs at least 2 seeds".into()));
        }
        if self.folds < 2 {
            return Err(Error::Spec("contract needs at least 2 folds".into()));
        }
        self.schedule.validate()?;
        self.score_weights.validate()?;
        self.fitness_weights.validate()
    }

    pub fn limits(&self) -> StageLimits {
        self.schedule.limits(self.stage)
    }

    pub fn budget(&self) -> u64 {
        self.limits().budget
    }

    pub fn sigma_limit(&self) -> f64 {
        self.limits().sigma_limit
    }

    pub fn tighten(&self, stage: Stage) -> Contract {
        Contract {
            stage,
            ..self.clone()
        }
    }

    /// Test-only style override: leakage gate off and random splits legal.
    pub fn without_gates(&self) -> Contract {
        Contract {
            leakage_gate: false,
            allow_random_split: true,
            ..self.clone()
        }
    }

    fn banned(&self, ds: &Dataset) -> Vec<usize> {
        let mut cols: Vec<usize> = ds.card.leaky_columns.iter().chain(&self.banned_columns).copied().collect();
        cols.sort_unstable();
        cols.dedup();
        cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateName {
    Leakage,
    Split,
    Determinism,
    Resources,
    Variance,
}

impl GateName {
    pub const ALL: [GateName; 5] = [
        GateName::Leakage,
        GateName::Split,
        GateName::Determinism,
        GateName::Resources,
        GateName::Variance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GateName::Leakage => "leakage",
            GateName::Split => "split",
            GateName::Determinism => "determinism",
            GateName::Resources => "resources",
            GateName::Variance => "variance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub gate: GateName,
    pub verdict: Verdict,
    pub evidence: String,
}

impl GateResult {
    pub fn pass(gate: GateName, evidence: impl Into<String>) -> Self {
        Self {
            gate,
            verdict: Verdict::Pass,
            evidence: evidence.into(),
        }
    }

    /// Fail verdicts always carry evidence.
    pub fn fail(gate: GateName, evidence: impl Into<String>) -> Self {
        let mut evidence = evidence.into();
        if evidence.is_empty() {
            evidence = format!("{} gate failed", gate.as_str());
        }
        Self {
            gate,
            verdict: Verdict::Fail,
            evidence,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

pub fn gate_leakage(g: &Genome, ds: &Dataset, c: &Contract) -> GateResult {
    if !c.leakage_gate {
        return GateResult::pass(GateName::Leakage, "leakage gate disabled");
    }
    let mask = &g.data_ops().feature_mask;
    let hits: Vec<usize> = c.banned(ds).into_iter().filter(|&j| mask.get(j).copied().unwrap_or(false)).collect();
    if hits.is_empty() {
        return GateResult::pass(GateName::Leakage, "no banned column selected");
    }
    let names: Vec<String> = hits
        .iter()
        .map(|&j| ds.card.feature_names.get(j).cloned().unwrap_or_else(|| format!("column {j}")))
        .collect();
    GateResult::fail(GateName::Leakage, format!("banned column(s) selected: {}", names.join(", ")))
}

pub fn gate_split(g: &Genome, c: &Contract) -> GateResult {
    match g.split().policy {
        SplitPolicy::Random if !c.allow_random_split => GateResult::fail(GateName::Split, "random split banned"),
        SplitPolicy::Random => GateResult::pass(GateName::Split, "random split allowed by override"),
        SplitPolicy::ByFamily => GateResult::pass(GateName::Split, "family-disjoint split"),
    }
}

/// Compares two runs of the same seed by their canonical metric strings.
pub fn determinism_verdict(first: &RunResult, second: &RunResult) -> GateResult {
    if first.status != RunStatus::Ok || second.status != RunStatus::Ok {
        let detail = first.failure.as_deref().or(second.failure.as_deref()).unwrap_or("");
        return GateResult::fail(
            GateName::Determinism,
            format!("nondeterministic or unstable execution: {detail}"),
        );
    }
    let (a, b) = (first.canonical_metrics(), second.canonical_metrics());
    if a == b {
        GateResult::pass(GateName::Determinism, "replay metrics identical")
    } else {
        GateResult::fail(GateName::Determinism, format!("replay differs: {a} vs {b}"))
    }
}

pub fn gate_determinism(g: &Genome, ds: &Dataset, c: &Contract, seed: u64) -> Result<GateResult> {
    let split = evaluation_split(ds, g.split().policy, c.folds, c.split_seed)?;
    let a = phenotype::run(g, ds, &split, seed, &c.score_weights, None)?;
    let b = phenotype::run(g, ds, &split, seed, &c.score_weights, None)?;
    Ok(determinism_verdict(&a, &b))
}

pub fn gate_resources(run: &RunResult, c: &Contract) -> GateResult {
    let est = run.resources.estimated_macs;
    let budget = c.budget();
    if est > budget {
        GateResult::fail(
            GateName::Resources,
            format!("estimated {est} MACs exceeds {} budget {budget}", c.stage.as_str()),
        )
    } else {
        GateResult::pass(GateName::Resources, format!("estimated {est} MACs within {budget}"))
    }
}

pub fn gate_variance(per_seed_scores: &[f64], c: &Contract) -> Result<GateResult> {
    if per_seed_scores.len() < 2 {
        return Err(Error::Argument("variance gate needs at least 2 seed scores".into()));
    }
    let std = metrics::population_std(per_seed_scores);
    let limit = c.sigma_limit();
    Ok(if std > limit {
        GateResult::fail(
            GateName::Variance,
            format!("seed score std {std:.6} exceeds {} limit {limit}", c.stage.as_str()),
        )
    } else {
        GateResult::pass(GateName::Variance, format!("seed score std {std:.6} within {limit}"))
    })
}

/// Executes one seed over all folds. Swappable so that fixtures can inject
/// faults or count executions.
pub trait Runner: Sync {
    fn run(&self, g: &Genome, ds: &Dataset, split: &Split, seed: u64, weights: &ScoreWeights, budget: Option<u64>) -> Result<RunResult>;
}

/// The production runner: the phenotype itself.
#[derive(Debug, Default, Clone, Copy)]
pub struct PhenotypeRunner;

impl Runner for PhenotypeRunner {
    fn run(&self, g: &Genome, ds: &Dataset, split: &Split, seed: u64, weights: &ScoreWeights, budget: Option<u64>) -> Result<RunResult> {
        phenotype::run(g, ds, split, seed, weights, budget)
    }
}

/// Wraps a runner and counts pipeline executions (one per seed pass).
#[derive(Debug, Default)]
pub struct CountingRunner<R> {
    pub inner: R,
    count: AtomicUsize,
}

impl<R: Runner> CountingRunner<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn executions(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl<R: Runner> Runner for CountingRunner<R> {
    fn run(&self, g: &Genome, ds: &Dataset, split: &Split, seed: u64, weights: &ScoreWeights, budget: Option<u64>) -> Result<RunResult> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.run(g, ds, split, seed, weights, budget)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub folds: Vec<MetricBundle>,
    #[serde(serialize_with = "ser_round6")]
    pub combined_score: f64,
}

fn ser_round6<S: serde::Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round6(*x))
}

fn ser_opt_round6<S: serde::Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => s.serialize_some(&round6(*v)),
        None => s.serialize_none(),
    }
}

/// Outcome of running one candidate through the contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub genome_id: GenomeId,
    pub stage: Stage,
    pub gates: Vec<GateResult>,
    pub failed_gate: Option<GateName>,
    pub rejected: bool,
    /// Whether any pipeline code ran (false for structural rejections).
    pub executed: bool,
    pub per_seed: Vec<SeedMetrics>,
    /// Mean over seeds of the mean over folds.
    pub aggregate: MetricBundle,
    #[serde(serialize_with = "ser_round6")]
    pub reliability: f64,
    #[serde(serialize_with = "ser_opt_round6")]
    pub fitness: Option<f64>,
    pub param_count: usize,
    pub estimated_macs: u64,
    pub inference_macs: u64,
    /// Fraction of seed passes that ended in a numeric failure.
    #[serde(serialize_with = "ser_round6")]
    pub failure_rate: f64,
}

impl Evaluation {
    pub fn fitness_marker(&self) -> metrics::Fitness {
        self.fitness.into()
    }

    pub fn combined_score(&self) -> f64 {
        if self.rejected {
            0.0
        } else {
            self.aggregate.combined_score
        }
    }

    pub fn gate(&self, name: GateName) -> Option<&GateResult> {
        self.gates.iter().find(|r| r.gate == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("evaluation serializes")
    }
}

/// Per-sample multiply-accumulate cost of one prediction.
pub fn inference_macs(model: &ModelSpec, active_features: usize, param_count: usize) -> u64 {
    let p = active_features as u64;
    match *model {
        ModelSpec::RidgeLinear { .. } => p,
        ModelSpec::KernelRidgeRbf { .. } => param_count as u64 * (p + 1),
        ModelSpec::Mlp1Hidden { hidden_units, .. } => hidden_units as u64 * (p + 1),
    }
}

fn seed_independent(model: &ModelSpec) -> bool {
    !matches!(model, ModelSpec::Mlp1Hidden { .. })
}

/// Canonical form of everything that influences execution: the loss only
/// matters to the mlp and the split block only through its policy.
pub fn execution_key(g: &Genome) -> String {
    let loss = matches!(g.model(), ModelSpec::Mlp1Hidden { .. }).then(|| g.loss());
    let key = serde_json::json!({
        "data_ops": g.data_ops(),
        "model": g.model(),
        "loss": loss,
        "policy": g.split().policy,
    });
    canonical_json(&key).expect("key serializes")
}

/// Cached outcome of the execution phase; independent of the stage.
#[derive(Debug, Clone)]
struct Executed {
    runs: Vec<RunResult>,
    replay: Option<RunResult>,
}

/// Runs candidates through the contract, caching execution results by
/// execution-relevant content so that revisited pipelines are only re-gated.
pub struct Evaluator<'a> {
    ds: &'a Dataset,
    runner: &'a dyn Runner,
    cache: Mutex<HashMap<(String, u64, usize, Vec<u64>), Executed>>,
    executions: AtomicUsize,
}

impl<'a> Evaluator<'a> {
    pub fn new(ds: &'a Dataset, runner: &'a dyn Runner) -> Self {
        Self {
            ds,
            runner,
            cache: Mutex::new(HashMap::new()),
            executions: AtomicUsize::new(0),
        }
    }

    pub fn dataset(&self) -> &Dataset {
        self.ds
    }

    /// Evaluations that reached the execution phase without a cache hit.
    pub fn executions(&self) -> usize {
        self.executions.load(Ordering::SeqCst)
    }

    pub fn evaluate(&self, g: &Genome, c: &Contract) -> Result<Evaluation> {
        let ds = self.ds;
        let mut gates = Vec::with_capacity(5);
        let mut ev = Evaluation {
            genome_id: g.id().clone(),
            stage: c.stage,
            gates: Vec::new(),
            failed_gate: None,
            rejected: true,
            executed: false,
            per_seed: Vec::new(),
            aggregate: MetricBundle::default(),
            reliability: 0.0,
            fitness: None,
            param_count: 0,
            estimated_macs: phenotype::resources_for(g, ds).estimated_macs,
            inference_macs: 0,
            failure_rate: 0.0,
        };
        let finish = |mut ev: Evaluation, gates: Vec<GateResult>| {
            ev.failed_gate = gates.iter().find(|r| !r.passed()).map(|r| r.gate);
            ev.rejected = ev.failed_gate.is_some();
            ev.gates = gates;
            ev
        };

        // Structural gates: no execution on failure.
        gates.push(gate_leakage(g, ds, c));
        if !gates[0].passed() {
            return Ok(finish(ev, gates));
        }
        let split = match evaluation_split(ds, g.split().policy, c.folds, c.split_seed) {
            Ok(s) => Some(s),
            Err(Error::InfeasibleSplit(msg)) => {
                gates.push(GateResult::fail(GateName::Split, format!("infeasible split: {msg}")));
                None
            }
            Err(e) => return Err(e),
        };
        let split_gate = gate_split(g, c);
        let Some(split) = split else {
            return Ok(finish(ev, gates));
        };
        let structural_ok = split_gate.passed();
        gates.push(split_gate);
        if !structural_ok {
            return Ok(finish(ev, gates));
        }
        if ev.estimated_macs > c.budget() {
            let probe = RunResult {
                seed: c.seeds[0],
                folds: Vec::new(),
                resources: phenotype::resources_for(g, ds),
                param_count: 0,
                status: RunStatus::BudgetExceeded,
                failure: None,
            };
            gates.push(gate_resources(&probe, c));
            return Ok(finish(ev, gates));
        }

        let key = (execution_key(g), c.split_seed, c.folds, c.seeds.clone());
        let cached = self.cache.lock().expect("cache lock").get(&key).cloned();
        let executed = match cached {
            Some(e) => e,
            None => {
                let e = self.execute(g, &split, c)?;
                self.executions.fetch_add(1, Ordering::SeqCst);
                self.cache.lock().expect("cache lock").insert(key, e.clone());
                e
            }
        };
        ev.executed = true;
        let failed = executed.runs.iter().filter(|r| r.status == RunStatus::NumericFailure).count();
        ev.failure_rate = failed as f64 / executed.runs.len() as f64;

        let first = &executed.runs[0];
        let determinism = match (&executed.replay, failed) {
            (Some(replay), 0) => determinism_verdict(first, replay),
            _ => {
                let bad = executed.runs.iter().find(|r| r.status != RunStatus::Ok).unwrap_or(first);
                determinism_verdict(bad, bad)
            }
        };
        let det_ok = determinism.passed();
        gates.push(determinism);
        if !det_ok {
            return Ok(finish(ev, gates));
        }
        let resources = gate_resources(first, c);
        let res_ok = resources.passed();
        gates.push(resources);
        if !res_ok {
            return Ok(finish(ev, gates));
        }

        ev.per_seed = executed
            .runs
            .iter()
            .map(|r| SeedMetrics {
                seed: r.seed,
                folds: r.fold_metrics(),
                combined_score: r.mean_score(),
            })
            .collect();
        let seed_scores: Vec<f64> = ev.per_seed.iter().map(|s| s.combined_score).collect();
        let seed_means: Vec<MetricBundle> = executed.runs.iter().map(|r| MetricBundle::mean(&r.fold_metrics())).collect();
        ev.aggregate = MetricBundle::mean(&seed_means);
        ev.reliability = metrics::reliability(&seed_scores)?;
        ev.param_count = executed.runs.iter().map(|r| r.param_count).max().unwrap_or(0);
        ev.inference_macs = inference_macs(g.model(), g.data_ops().active_features(), ev.param_count);
        gates.push(gate_variance(&seed_scores, c)?);
        let mut ev = finish(ev, gates);
        if !ev.rejected {
            ev.fitness = metrics::fitness(&ev, &c.fitness_weights).value();
        }
        Ok(ev)
    }

    fn execute(&self, g: &Genome, split: &Split, c: &Contract) -> Result<Executed> {
        let w = &c.score_weights;
        let runs = if seed_independent(g.model()) {
            // Closed-form fits ignore the seed: one pass stands for every seed.
            let first = self.runner.run(g, self.ds, split, c.seeds[0], w, None)?;
            c.seeds.iter().map(|&s| RunResult { seed: s, ..first.clone() }).collect()
        } else {
            c.seeds
                .iter()
                .map(|&s| self.runner.run(g, self.ds, split, s, w, None))
                .collect::<Result<Vec<_>>>()?
        };
        let replay = if runs.iter().all(|r| r.status == RunStatus::Ok) {
            Some(self.runner.run(g, self.ds, split, c.seeds[0], w, None)?)
        } else {
            None
        };
        Ok(Executed { runs, replay })
    }
}

/// One-shot evaluation with the production runner and no cache.
pub fn evaluate(g: &Genome, ds: &Dataset, c: &Contract) -> Result<Evaluation> {
    Evaluator::new(ds, &PhenotypeRunner).evaluate(g, c)
}
