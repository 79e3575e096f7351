//! Lineage and trajectory analytics, and the ablation harness.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contract::{Contract, Evaluator};
use crate::error::{Error, Result};
use crate::evolve::{best_so_far, run_evolution, EvolutionConfig, SamplingMode, TrajectoryRecord};
use crate::genome::GenomeId;
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineageNode {
    pub candidate_id: GenomeId,
    pub score: f64,
    pub iteration: u64,
    pub generation: u32,
    pub operator: String,
    pub island: usize,
    /// The link from this node to its parent crossed islands by migration.
    pub migrated: bool,
}

impl LineageNode {
    fn from_record(r: &TrajectoryRecord) -> Self {
        Self {
            candidate_id: r.candidate_id.clone(),
            score: r.score,
            iteration: r.iteration,
            generation: r.generation,
            operator: r.operator.clone(),
            island: r.island,
            migrated: r.migrated_parent,
        }
    }
}

/// Ancestor chain of `id`, oldest first. Each parent link resolves to the
/// latest record of the parent id that precedes the child.
pub fn lineage(trajectory: &[TrajectoryRecord], id: &GenomeId) -> Result<Vec<LineageNode>> {
    let mut pos = trajectory
        .iter()
        .position(|r| &r.candidate_id == id)
        .ok_or_else(|| Error::Lookup(format!("candidate {id} not in trajectory")))?;
    let mut chain = vec![LineageNode::from_record(&trajectory[pos])];
    while let Some(parent) = &trajectory[pos].parent_id {
        pos = trajectory[..pos]
            .iter()
            .rposition(|r| &r.candidate_id == parent)
            .ok_or_else(|| Error::Lookup(format!("parent {parent} of {} has no earlier record", trajectory[pos].candidate_id)))?;
        chain.push(LineageNode::from_record(&trajectory[pos]));
    }
    chain.reverse();
    Ok(chain)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryPoint {
    pub iteration: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-iteration statistics of the best-so-far combined score across runs.
pub fn trajectory_summary(runs: &[Vec<TrajectoryRecord>]) -> Result<Vec<SummaryPoint>> {
    let Some(first) = runs.first() else {
        return Err(Error::Argument("trajectory summary needs at least one run".into()));
    };
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Argument("runs have unequal evaluation budgets".into()));
    }
    let curves: Vec<Vec<f64>> = runs.iter().map(|r| best_so_far(r)).collect();
    Ok((0..first.len())
        .map(|i| {
            let vals = curves.iter().map(|c| c[i]);
            SummaryPoint {
                iteration: i as u64 + 1,
                mean: vals.clone().sum::<f64>() / curves.len() as f64,
                min: vals.clone().fold(f64::INFINITY, f64::min),
                max: vals.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect())
}

/// First iteration whose best-so-far score reaches 95% of the final best.
pub fn iterations_to_95(trajectory: &[TrajectoryRecord]) -> u64 {
    let curve = best_so_far(trajectory);
    let target = 0.95 * curve.last().copied().unwrap_or(0.0);
    curve
        .iter()
        .position(|&v| v >= target)
        .map_or(0, |i| trajectory[i].iteration)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoFeedback,
    NoIsland,
    NoAdaptive,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoFeedback,
        AblationVariant::NoIsland,
        AblationVariant::NoAdaptive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoFeedback => "no_feedback",
            AblationVariant::NoIsland => "no_island",
            AblationVariant::NoAdaptive => "no_adaptive",
        }
    }

    /// Removes exactly one mechanism; the evaluation budget is unchanged.
    pub fn apply(self, base: &EvolutionConfig) -> EvolutionConfig {
        let mut c = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoFeedback => c.feedback = false,
            AblationVariant::NoIsland => {
                c.population *= c.islands;
                c.islands = 1;
            }
            AblationVariant::NoAdaptive => c.sampling = SamplingMode::Topk,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: AblationVariant,
    pub seed_index: usize,
    pub master_seed: u64,
    pub final_best_score: f64,
    pub iterations_to_95: u64,
    pub evaluations: usize,
    pub migration_events: usize,
    pub operator_weights_uniform: bool,
    pub qd_monotone: bool,
    pub trajectory: Vec<TrajectoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantMean {
    pub variant: AblationVariant,
    pub mean_final_best_score: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub runs: Vec<AblationRun>,
}

impl AblationResult {
    pub fn mean(&self, variant: AblationVariant) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.variant == variant).map(|r| r.final_best_score).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn means(&self) -> Vec<VariantMean> {
        AblationVariant::ALL
            .iter()
            .filter_map(|&variant| {
                let runs = self.runs.iter().filter(|r| r.variant == variant).count();
                self.mean(variant).map(|m| VariantMean {
                    variant,
                    mean_final_best_score: m,
                    runs,
                })
            })
            .collect()
    }

    /// The full method's mean strictly exceeds every other variant's.
    pub fn full_strictly_best(&self) -> bool {
        let Some(full) = self.mean(AblationVariant::Full) else {
            return false;
        };
        AblationVariant::ALL[1..]
            .iter()
            .all(|&v| self.mean(v).is_some_and(|m| full > m))
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "seed", "final_best_score", "iterations_to_95pct"])?;
        for r in &self.runs {
            w.write_record([
                r.variant.as_str().to_string(),
                r.master_seed.to_string(),
                format!("{:.6}", r.final_best_score),
                r.iterations_to_95.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Writes `ablation_summary.csv`, `ablation_report.json` and one
    /// `trajectory_{variant}_{seed}.jsonl` per run.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation_summary.csv"), self.summary_csv()?)?;
        for r in &self.runs {
            let mut text = String::new();
            for rec in &r.trajectory {
                text.push_str(&rec.to_json());
                text.push('\n');
            }
            fs::write(dir.join(format!("trajectory_{}_{}.jsonl", r.variant.as_str(), r.master_seed)), text)?;
        }
        let report = serde_json::json!({
            "note": "full, no_feedback and no_adaptive share the initial populations of each seed; no_island merges all islands into one population of equal total size and so starts from a different population",
            "means": self.means(),
            "full_strictly_best": self.full_strictly_best(),
        });
        fs::write(dir.join("ablation_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(())
    }
}

const ABLATION_STREAM: u64 = 0xab1a_7e00;

/// Master seed of the `index`-th ablation repetition.
pub fn ablation_seed(master_seed: u64, index: usize) -> u64 {
    derive_seed(master_seed, ABLATION_STREAM + index as u64)
}

/// Runs every variant `n_seeds` times. All runs share one evaluator, whose
/// cache only saves time and never changes results.
pub fn run_ablation(base: &EvolutionConfig, variants: &[AblationVariant], n_seeds: usize, evaluator: &Evaluator, contract: &Contract) -> Result<AblationResult> {
    let mut runs = Vec::with_capacity(variants.len() * n_seeds);
    for seed_index in 0..n_seeds {
        let seed = ablation_seed(base.master_seed, seed_index);
        for &variant in variants {
            let config = EvolutionConfig {
                master_seed: seed,
                ..variant.apply(base)
            };
            let result = run_evolution(&config, evaluator, contract)?;
            runs.push(AblationRun {
                variant,
                seed_index,
                master_seed: seed,
                final_best_score: result.best_score,
                iterations_to_95: iterations_to_95(&result.trajectory),
                evaluations: result.trajectory.len(),
                migration_events: result.migrations.len(),
                operator_weights_uniform: result.weight_history.iter().all(|w| w.iter().all(|v| *v == 0.25)),
                qd_monotone: result.qd_history.windows(2).all(|w| w[1] >= w[0]),
                trajectory: result.trajectory,
            });
        }
    }
    Ok(AblationResult { runs })
}
