//! Screen-and-escalate deployment simulation: uncertainty abstention,
//! envelope checks, KPIs and return on investment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genome::Genome;
use crate::linalg::Matrix;
use crate::phenotype::Pipeline;
use crate::taskbench::Dataset;

/// Relative margin applied to each side of the training box.
pub const DEFAULT_ENVELOPE_MARGIN: f64 = 0.05;

/// Axis-aligned training feature box, widened by a fraction of each range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub columns: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Envelope {
    pub fn fit(x: &Matrix, rows: &[usize], columns: &[usize], margin: f64) -> Self {
        let mut lo = Vec::with_capacity(columns.len());
        let mut hi = Vec::with_capacity(columns.len());
        for &j in columns {
            let vals = rows.iter().map(|&i| x.get(i, j));
            let min = vals.clone().fold(f64::INFINITY, f64::min);
            let max = vals.fold(f64::NEG_INFINITY, f64::max);
            let pad = margin * (max - min);
            lo.push(min - pad);
            hi.push(max + pad);
        }
        Self {
            columns: columns.to_vec(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, row: &[f64]) -> bool {
        self.columns
            .iter()
            .enumerate()
            .all(|(c, &j)| row[j] >= self.lo[c] && row[j] <= self.hi[c])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Escalate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationReason {
    HighUncertainty,
    OutOfEnvelope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningDecision {
    pub sample: usize,
    pub mean: f64,
    pub sigma: f64,
    pub decision: Decision,
    pub reason: Option<EscalationReason>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScreeningReport {
    pub decisions: Vec<ScreeningDecision>,
    /// Accepted sample ids, lowest predicted drag first.
    pub ranking: Vec<usize>,
}

impl ScreeningReport {
    pub fn escalated(&self) -> usize {
        self.decisions.iter().filter(|d| d.decision == Decision::Escalate).count()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample", "mean", "sigma", "decision", "reason"])?;
        for d in &self.decisions {
            w.write_record([
                d.sample.to_string(),
                format!("{:.6}", d.mean),
                format!("{:.6}", d.sigma),
                match d.decision {
                    Decision::Accept => "accept".to_string(),
                    Decision::Escalate => "escalate".to_string(),
                },
                match d.reason {
                    None => String::new(),
                    Some(EscalationReason::HighUncertainty) => "high_uncertainty".to_string(),
                    Some(EscalationReason::OutOfEnvelope) => "out_of_envelope".to_string(),
                },
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Applies the abstention rule to precomputed per-sample (mean, σ) values.
/// Out-of-envelope takes precedence as the recorded reason.
pub fn decide(means: &[f64], sigmas: &[f64], in_envelope: &[bool], sigma_max: f64) -> ScreeningReport {
    let decisions: Vec<ScreeningDecision> = (0..means.len())
        .map(|i| {
            let reason = if !in_envelope[i] {
                Some(EscalationReason::OutOfEnvelope)
            } else if sigmas[i] > sigma_max {
                Some(EscalationReason::HighUncertainty)
            } else {
                None
            };
            ScreeningDecision {
                sample: i,
                mean: means[i],
                sigma: sigmas[i],
                decision: if reason.is_some() {
                    Decision::Escalate
                } else {
                    Decision::Accept
                },
                reason,
            }
        })
        .collect();
    let mut ranking: Vec<usize> = decisions
        .iter()
        .filter(|d| d.decision == Decision::Accept)
        .map(|d| d.sample)
        .collect();
    ranking.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    ScreeningReport {
        decisions,
        ranking,
    }
}

/// Screens every row of `batch` through the seed ensemble of `pipeline`.
pub fn screen(batch: &Matrix, pipeline: &Pipeline, sigma_max: f64, envelope: &Envelope) -> Result<ScreeningReport> {
    if batch.rows() == 0 {
        return Ok(ScreeningReport::default());
    }
    let rows: Vec<usize> = (0..batch.rows()).collect();
    let (means, sigmas) = pipeline.predict_with_uncertainty(batch, &rows, None)?;
    let inside: Vec<bool> = rows.iter().map(|&i| envelope.contains(batch.row(i))).collect();
    Ok(decide(&means, &sigmas, &inside, sigma_max))
}

/// Fits one replica per seed of `g` on `rows` and returns it with the
/// matching envelope over the model's input columns.
pub fn train_for_screening(g: &Genome, ds: &Dataset, rows: &[usize], seeds: &[u64], margin: f64) -> Result<(Pipeline, Envelope)> {
    let mut p = Pipeline::instantiate(g, ds)?;
    p.fit_replicas(ds, rows, seeds)
        .map_err(|e| Error::State(format!("screening pipeline failed to train: {}", e.0)))?;
    let columns = p.replicas()[0].preprocessor.columns().to_vec();
    let env = Envelope::fit(&ds.features, rows, &columns, margin);
    Ok((p, env))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub total: usize,
    pub escalated: usize,
    pub escalation_rate: f64,
    pub throughput_gain: f64,
    /// Absent when no sample was accepted.
    pub topk_ranking_fidelity: Option<f64>,
    pub k: usize,
}

/// Deployment KPIs against simulated ground truth. Top-K means the K lowest
/// drag values among accepted samples.
pub fn kpis(report: &ScreeningReport, truth: &[f64], k: usize) -> Result<KpiReport> {
    if truth.len() != report.decisions.len() {
        return Err(Error::Argument(format!(
            "{} ground-truth labels for {} decisions",
            truth.len(),
            report.decisions.len()
        )));
    }
    let total = report.decisions.len();
    let escalated = report.escalated();
    let k_eff = k.min(report.ranking.len());
    let fidelity = (k_eff > 0).then(|| {
        let predicted: Vec<usize> = report.ranking[..k_eff].to_vec();
        let mut by_truth = report.ranking.clone();
        by_truth.sort_by(|&a, &b| truth[a].total_cmp(&truth[b]).then(a.cmp(&b)));
        let hits = predicted.iter().filter(|i| by_truth[..k_eff].contains(i)).count();
        hits as f64 / k_eff as f64
    });
    let denom = (escalated + k) as f64;
    Ok(KpiReport {
        total,
        escalated,
        escalation_rate: if total == 0 { 0.0 } else { escalated as f64 / total as f64 },
        throughput_gain: if denom > 0.0 { total as f64 / denom } else { 0.0 },
        topk_ranking_fidelity: fidelity,
        k,
    })
}

/// Inputs of the return-on-investment ratio, in abstract cost units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiInputs {
    pub n_screened: f64,
    pub cost_cfd: f64,
    pub cost_surrogate: f64,
    pub cost_validation: f64,
}

/// `(N·Cost_CFD − (Cost_Surrogate + Cost_Validation)) / (Cost_Surrogate + Cost_Validation)`.
pub fn roi(r: &RoiInputs) -> Result<f64> {
    let parts = [r.n_screened, r.cost_cfd, r.cost_surrogate, r.cost_validation];
    if parts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Argument("roi inputs must be finite and non-negative".into()));
    }
    let spent = r.cost_surrogate + r.cost_validation;
    if spent <= 0.0 {
        return Err(Error::Argument("Cost_Surrogate + Cost_Validation must be > 0".into()));
    }
    Ok((r.n_screened * r.cost_cfd - spent) / spent)
}

/// A batch of designs to screen, optionally with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Option<Vec<f64>>,
}

/// Reads a batch CSV whose header names every feature column of `ds`
/// (`x0`, `x1`, ...); a `label` column is optional and other columns are
/// ignored. Errors name the 1-based data row.
pub fn read_batch(path: &Path, feature_names: &[String]) -> Result<Batch> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let position = |name: &str| header.iter().position(|h| h == name);
    let cols: Vec<usize> = feature_names
        .iter()
        .map(|n| position(n).ok_or_else(|| Error::Parse(format!("batch header lacks column {n}"))))
        .collect::<Result<_>>()?;
    let label_col = position("label");
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
        let parse = |c: usize, name: &str| -> Result<f64> {
            let raw = rec.get(c).ok_or_else(|| Error::Parse(format!("row {row}: missing {name}")))?;
            raw.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse(format!("row {row}: column {name}: not a finite number: {raw:?}")))
        };
        for (&c, name) in cols.iter().zip(feature_names) {
            data.push(parse(c, name)?);
        }
        if let Some(c) = label_col {
            labels.push(parse(c, "label")?);
        }
        rows += 1;
    }
    Ok(Batch {
        features: Matrix::from_vec(rows, feature_names.len(), data),
        labels: label_col.map(|_| labels),
    })
}
