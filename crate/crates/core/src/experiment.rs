//! End-to-end commands: search, replay, ablation, screening and export.
//! Each writes its artifacts under a directory and returns a summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::contract::{Contract, Evaluation, Evaluator, PhenotypeRunner, Stage};
use crate::error::{Error, Result};
use crate::escalate::{kpis, read_batch, roi, screen as screen_batch, train_for_screening, KpiReport, RoiInputs, ScreeningReport};
use crate::evolve::{run_evolution, TrajectoryRecord};
use crate::genome::{Genome, GenomeId};
use crate::report::{run_ablation, AblationResult, AblationVariant};
use crate::taskbench::{generate, Dataset, GENERATOR_VERSION};
use crate::ENGINE_VERSION;

pub const BEST_GENOME_FILE: &str = "best.genome.json";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const ARCHIVE_FILE: &str = "archive.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Process exit status for an error: 2 invalid input, 3 failed
/// verification, 4 I/O, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Spec(_) | Error::Validation(_) | Error::Argument(_) | Error::Parse(_) | Error::Json(_) | Error::Lookup(_) => 2,
        Error::Verification(_) => 3,
        Error::Io(_) | Error::Csv(_) => 4,
        _ => 1,
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::Argument(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub engine_version: String,
    pub generator_version: String,
    pub dataset_hash: String,
    pub master_seed: u64,
    pub evaluations: usize,
    pub best_genome_id: Option<GenomeId>,
    pub best_score: f64,
    /// Wall-clock creation time; the only non-reproducible artifact field.
    pub created_unix_seconds: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub best: Option<Genome>,
    pub trajectory: Vec<TrajectoryRecord>,
}

/// Runs the search and writes best genome, trajectory, archive, summary
/// and manifest.
pub fn run(config: &ExperimentConfig, force: bool) -> Result<RunOutcome> {
    config.validate()?;
    let dir = config.output_dir.clone();
    prepare_output_dir(&dir, force)?;
    let ds = generate(&config.task)?;
    let contract = config.contract()?;
    let evolution = config.evolution()?;
    let evaluator = Evaluator::new(&ds, &PhenotypeRunner);
    let result = run_evolution(&evolution, &evaluator, &contract)?;

    let best = result.best.as_ref().map(|m| m.genome.clone());
    if let Some(g) = &best {
        fs::write(dir.join(BEST_GENOME_FILE), g.to_canonical_json() + "\n")?;
    }
    fs::write(dir.join(TRAJECTORY_FILE), result.trajectory_jsonl())?;
    fs::write(dir.join(ARCHIVE_FILE), result.archive.to_json() + "\n")?;
    fs::write(dir.join(SUMMARY_FILE), result.summary_csv()?)?;
    let manifest = Manifest {
        config_hash: config.hash()?,
        engine_version: ENGINE_VERSION.to_string(),
        generator_version: GENERATOR_VERSION.to_string(),
        dataset_hash: ds.content_hash().to_string(),
        master_seed: evolution.master_seed,
        evaluations: result.trajectory.len(),
        best_genome_id: best.as_ref().map(|g| g.id().clone()),
        best_score: result.best_score,
        created_unix_seconds: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunOutcome {
        dir,
        manifest,
        best,
        trajectory: result.trajectory,
    })
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("trajectory line {}: {e}", i + 1))))
        .collect()
}

pub fn read_genome(path: &Path) -> Result<Genome> {
    Genome::from_json(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub evaluation: Evaluation,
    /// The trajectory record compared against, when verifying.
    pub reference: Option<TrajectoryRecord>,
}

/// Re-evaluates `genome` under the config's contract at `stage`.
pub fn evaluate_genome(config: &ExperimentConfig, genome: &Genome, stage: Stage) -> Result<Evaluation> {
    config.validate()?;
    let ds = generate(&config.task)?;
    let contract: Contract = config.contract()?.tighten(stage);
    Evaluator::new(&ds, &PhenotypeRunner).evaluate(genome, &contract)
}

/// Replays a genome. With a trajectory, the stage of its last record is
/// used and the metrics must match that record exactly.
pub fn replay(config: &ExperimentConfig, genome: &Genome, trajectory: Option<&[TrajectoryRecord]>) -> Result<ReplayOutcome> {
    let reference = match trajectory {
        None => None,
        Some(t) => Some(
            t.iter()
                .rev()
                .find(|r| r.candidate_id == *genome.id())
                .cloned()
                .ok_or_else(|| Error::Lookup(format!("{} not in trajectory", genome.id())))?,
        ),
    };
    let stage = reference.as_ref().map_or(Stage::Explore, |r| r.stage);
    let evaluation = evaluate_genome(config, genome, stage)?;
    if let Some(r) = &reference {
        let fresh = serde_json::to_string(&evaluation.aggregate)?;
        let stored = serde_json::to_string(&r.metrics)?;
        let outcome = evaluation.failed_gate.map_or("pass", |g| g.as_str());
        if fresh != stored || outcome != r.gate_outcome {
            return Err(Error::Verification(format!(
                "replayed {outcome} {fresh} differs from recorded {} {stored}",
                r.gate_outcome
            )));
        }
    }
    Ok(ReplayOutcome { evaluation, reference })
}

/// Runs every ablation variant over the configured number of seeds and
/// writes the ablation artifacts to the output directory.
pub fn ablate(config: &ExperimentConfig, force: bool) -> Result<AblationResult> {
    config.validate()?;
    prepare_output_dir(&config.output_dir, force)?;
    let ds = generate(&config.task)?;
    let evaluator = Evaluator::new(&ds, &PhenotypeRunner);
    let result = run_ablation(
        &config.evolution()?,
        &AblationVariant::ALL,
        config.ablation.seeds,
        &evaluator,
        &config.contract()?,
    )?;
    result.write(&config.output_dir)?;
    Ok(result)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScreenOutcome {
    #[serde(skip)]
    pub report: ScreeningReport,
    pub genome_id: GenomeId,
    pub sigma_max: f64,
    pub kpis: KpiReport,
    /// Absent when the batch has no label column.
    pub ground_truth_available: bool,
    pub roi_inputs: RoiInputs,
    pub roi: f64,
}

/// Screens a batch CSV with `genome` trained on every non-holdout sample.
/// Writes `screen_decisions.csv` and `screen_report.json` to `out_dir`.
pub fn screen(config: &ExperimentConfig, genome: &Genome, batch_path: &Path, sigma_max: f64, k: usize, out_dir: &Path) -> Result<ScreenOutcome> {
    config.validate()?;
    if !(sigma_max >= 0.0) {
        return Err(Error::Argument(format!("sigma_max must be >= 0 (got {sigma_max})")));
    }
    crate::genome::validate(genome).into_result()?;
    let ds = generate(&config.task)?;
    let rows = training_rows(&ds);
    let contract = config.contract()?;
    let (pipeline, envelope) = train_for_screening(genome, &ds, &rows, &contract.seeds, config.screening.envelope_margin)?;
    let batch = read_batch(batch_path, &ds.card.feature_names)?;
    let report = screen_batch(&batch.features, &pipeline, sigma_max, &envelope)?;

    let ground_truth_available = batch.labels.is_some();
    let truth = batch.labels.unwrap_or_else(|| report.decisions.iter().map(|d| d.mean).collect());
    let kpis = kpis(&report, &truth, k)?;
    let roi_inputs = RoiInputs {
        n_screened: report.decisions.len() as f64,
        cost_cfd: config.screening.cost_cfd,
        cost_surrogate: config.screening.cost_surrogate,
        cost_validation: (report.escalated() + k) as f64 * config.screening.cost_cfd,
    };
    let outcome = ScreenOutcome {
        genome_id: genome.id().clone(),
        sigma_max,
        kpis,
        ground_truth_available,
        roi_inputs,
        roi: roi(&roi_inputs)?,
        report,
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("screen_decisions.csv"), outcome.report.to_csv()?)?;
    fs::write(out_dir.join("screen_report.json"), serde_json::to_string_pretty(&outcome)? + "\n")?;
    Ok(outcome)
}

/// Every sample outside the frozen holdout families.
pub fn training_rows(ds: &Dataset) -> Vec<usize> {
    let holdout = ds.holdout_indices();
    (0..ds.len()).filter(|i| holdout.binary_search(i).is_err()).collect()
}

/// Writes `dataset.csv`, `holdout.csv` and `dataset_card.json`.
pub fn export(config: &ExperimentConfig, out_dir: &Path) -> Result<Dataset> {
    config.task.validate()?;
    let ds = generate(&config.task)?;
    fs::create_dir_all(out_dir)?;
    ds.write_csv(&out_dir.join("dataset.csv"))?;
    ds.write_card(&out_dir.join("dataset_card.json"))?;
    let mut w = csv::Writer::from_path(out_dir.join("holdout.csv"))?;
    let mut header = ds.card.feature_names.clone();
    header.push("label".into());
    w.write_record(&header)?;
    for i in ds.holdout_indices() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Spec("x".into())), 2);
        assert_eq!(exit_code(&Error::Verification("x".into())), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 4);
        assert_eq!(exit_code(&Error::State("x".into())), 1);
    }

    #[test]
    fn output_dir_refusal() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        prepare_output_dir(&dir, false).unwrap();
        prepare_output_dir(&dir, false).unwrap();
        fs::write(dir.join("f"), "x").unwrap();
        assert!(matches!(prepare_output_dir(&dir, false), Err(Error::Argument(_))));
        prepare_output_dir(&dir, true).unwrap();
    }

    #[test]
    fn training_rows_exclude_holdout() {
        let ds = generate(&Default::default()).unwrap();
        let rows = training_rows(&ds);
        let holdout = ds.holdout_indices();
        assert_eq!(rows.len() + holdout.len(), ds.len());
        assert!(rows.iter().all(|r| !holdout.contains(r)));
    }
}
