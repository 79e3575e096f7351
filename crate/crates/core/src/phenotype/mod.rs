//! Executable form of a genome: preprocessing, model fitting under the
//! specified loss, prediction with cross-seed uncertainty and resource
//! accounting.

pub mod loss;
pub mod models;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genome::{Genome, LossSpec, ModelSpec, Normalization};
use crate::linalg::Matrix;
use crate::metrics::{MetricBundle, ScoreWeights};
use crate::taskbench::{Dataset, PairSet, Split, DEFAULT_PAIR_EPS};

pub use loss::loss_value_and_gradient;
pub use models::FittedModel;

/// Per-column statistics learned from training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    columns: Vec<usize>,
    clip: Option<Vec<(f64, f64)>>,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Preprocessor {
    pub fn fit(x: &Matrix, train: &[usize], mask: &[bool], normalization: Normalization, clip: Option<f64>) -> Self {
        let columns: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
        let clip_bounds = clip.map(|m| {
            columns
                .iter()
                .map(|&j| {
                    let mut v: Vec<f64> = train.iter().map(|&i| x.get(i, j)).collect();
                    v.sort_by(f64::total_cmp);
                    let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
                    let iqr = q3 - q1;
                    (q1 - m * iqr, q3 + m * iqr)
                })
                .collect::<Vec<_>>()
        });
        let mut pre = Self {
            columns,
            clip: clip_bounds,
            shift: vec![],
            scale: vec![],
        };
        let n = train.len() as f64;
        let p = pre.columns.len();
        let cols: Vec<Vec<f64>> = (0..p)
            .map(|c| train.iter().map(|&i| pre.clipped(c, x.get(i, pre.columns[c]))).collect())
            .collect();
        for col in cols {
            let (shift, scale) = match normalization {
                Normalization::None => (0.0, 1.0),
                Normalization::Zscore => {
                    let mean = col.iter().sum::<f64>() / n;
                    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
                }
                Normalization::Minmax => {
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (lo, if hi > lo { hi - lo } else { 1.0 })
                }
            };
            pre.shift.push(shift);
            pre.scale.push(scale);
        }
        pre
    }

    fn clipped(&self, c: usize, v: f64) -> f64 {
        match &self.clip {
            Some(bounds) => v.clamp(bounds[c].0, bounds[c].1),
            None => v,
        }
    }

    /// Transforms full-width rows into the masked, clipped, normalized space.
    pub fn transform(&self, x: &Matrix, rows: &[usize]) -> Matrix {
        let p = self.columns.len();
        let mut data = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            let row = x.row(i);
            for (c, &j) in self.columns.iter().enumerate() {
                data.push((self.clipped(c, row[j]) - self.shift[c]) / self.scale[c]);
            }
        }
        Matrix::from_vec(rows.len(), p, data)
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }
}

/// Per-solver-version label offsets relative to the training mean.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DriftCorrection {
    offsets: Vec<f64>,
}

impl DriftCorrection {
    pub fn fit(labels: &[f64], versions: &[usize]) -> Self {
        let n_versions = versions.iter().copied().max().map_or(0, |m| m + 1);
        let overall = labels.iter().sum::<f64>() / labels.len() as f64;
        let mut sums = vec![0.0; n_versions];
        let mut counts = vec![0usize; n_versions];
        for (y, &v) in labels.iter().zip(versions) {
            sums[v] += y;
            counts[v] += 1;
        }
        let offsets = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 - overall } else { 0.0 })
            .collect();
        Self { offsets }
    }

    pub fn offset(&self, version: usize) -> f64 {
        self.offsets.get(version).copied().unwrap_or(0.0)
    }

    pub fn compensate(&self, labels: &[f64], versions: &[usize]) -> Vec<f64> {
        labels.iter().zip(versions).map(|(y, &v)| y - self.offset(v)).collect()
    }
}

/// One trained model together with the training-only statistics it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedReplica {
    pub seed: u64,
    pub preprocessor: Preprocessor,
    pub drift: Option<DriftCorrection>,
    pub model: FittedModel,
}

impl FittedReplica {
    /// Predicts rows of `x`; `versions` restores per-version offsets when
    /// drift compensation was used in training.
    pub fn predict(&self, x: &Matrix, rows: &[usize], versions: Option<&[usize]>) -> Vec<f64> {
        let z = self.preprocessor.transform(x, rows);
        (0..rows.len())
            .map(|r| {
                let base = self.model.predict_row(z.row(r));
                match (&self.drift, versions) {
                    (Some(d), Some(v)) => base + d.offset(v[rows[r]]),
                    _ => base,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.model.param_count()
    }
}

/// Raised when a fit cannot produce a finite model.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericFailure(pub String);

/// A genome bound to a dataset, holding zero or more fitted seed replicas.
#[derive(Debug, Clone)]
pub struct Pipeline {
    genome: Genome,
    replicas: Vec<FittedReplica>,
}

impl Pipeline {
    pub fn instantiate(g: &Genome, ds: &Dataset) -> Result<Self> {
        let mask = &g.data_ops().feature_mask;
        if mask.len() != ds.n_columns() {
            return Err(Error::Instantiation(format!(
                "feature_mask has {} entries but the dataset has {} columns",
                mask.len(),
                ds.n_columns()
            )));
        }
        Ok(Self {
            genome: g.clone(),
            replicas: Vec::new(),
        })
    }

    pub fn genome(&self) -> &Genome {
        &self.genome
    }

    pub fn replicas(&self) -> &[FittedReplica] {
        &self.replicas
    }

    /// Fits one replica on `train`. Every statistic (clip bounds, scaling,
    /// drift offsets, model state) comes from the training rows.
    pub fn fit(&self, ds: &Dataset, train: &[usize], seed: u64) -> std::result::Result<FittedReplica, NumericFailure> {
        let data = self.genome.data_ops();
        let pre = Preprocessor::fit(
            &ds.features,
            train,
            &data.feature_mask,
            data.normalization,
            data.outlier_clip,
        );
        let x = pre.transform(&ds.features, train);
        let raw: Vec<f64> = train.iter().map(|&i| ds.labels[i]).collect();
        let (y, drift) = if data.drift_compensation {
            let versions: Vec<usize> = train.iter().map(|&i| ds.version[i]).collect();
            let d = DriftCorrection::fit(&raw, &versions);
            (d.compensate(&raw, &versions), Some(d))
        } else {
            (raw, None)
        };
        let model = match self.genome.model() {
            ModelSpec::RidgeLinear { lambda_reg } => models::fit_ridge(&x, &y, *lambda_reg),
            ModelSpec::KernelRidgeRbf { lambda_reg, gamma } => models::fit_kernel_ridge(&x, &y, *lambda_reg, *gamma),
            spec @ ModelSpec::Mlp1Hidden { .. } => models::fit_mlp(&x, &y, spec, self.genome.loss(), seed),
        }
        .ok_or_else(|| NumericFailure(format!("{:?} fit produced a singular or non-finite model", self.genome.model().family())))?;
        Ok(FittedReplica {
            seed,
            preprocessor: pre,
            drift,
            model,
        })
    }

    pub fn add_replica(&mut self, replica: FittedReplica) {
        self.replicas.push(replica);
    }

    /// Fits one replica per seed on `train`.
    pub fn fit_replicas(&mut self, ds: &Dataset, train: &[usize], seeds: &[u64]) -> std::result::Result<(), NumericFailure> {
        for &seed in seeds {
            let r = self.fit(ds, train, seed)?;
            self.replicas.push(r);
        }
        Ok(())
    }

    /// Mean prediction over the fitted replicas.
    pub fn predict(&self, x: &Matrix, rows: &[usize], versions: Option<&[usize]>) -> Result<Vec<f64>> {
        if self.replicas.is_empty() {
            return Err(Error::State("pipeline has no fitted replica".into()));
        }
        Ok(self.predict_with_uncertainty_unchecked(x, rows, versions).0)
    }

    /// Per-row mean and population standard deviation across seed replicas.
    pub fn predict_with_uncertainty(&self, x: &Matrix, rows: &[usize], versions: Option<&[usize]>) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.replicas.len() < 2 {
            return Err(Error::State(format!(
                "uncertainty needs at least 2 seed replicas (have {})",
                self.replicas.len()
            )));
        }
        Ok(self.predict_with_uncertainty_unchecked(x, rows, versions))
    }

    fn predict_with_uncertainty_unchecked(&self, x: &Matrix, rows: &[usize], versions: Option<&[usize]>) -> (Vec<f64>, Vec<f64>) {
        let per_replica: Vec<Vec<f64>> = self.replicas.iter().map(|r| r.predict(x, rows, versions)).collect();
        ensemble_stats(&per_replica)
    }
}

/// Mean and population std across replicas, per position.
pub fn ensemble_stats(per_replica: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = per_replica.len() as f64;
    let n = per_replica.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    for i in 0..n {
        let mu = per_replica.iter().map(|p| p[i]).sum::<f64>() / m;
        let var = per_replica.iter().map(|p| (p[i] - mu) * (p[i] - mu)).sum::<f64>() / m;
        mean[i] = mu;
        std[i] = var.sqrt();
    }
    (mean, std)
}

/// Analytic multiply-accumulate estimate for one training run plus one
/// prediction pass over `n` samples with `p` active columns.
pub fn estimate_macs(model: &ModelSpec, loss: &LossSpec, n: usize, p: usize) -> u64 {
    let (n, p) = (n as u64, p as u64);
    match *model {
        ModelSpec::RidgeLinear { .. } => n * p * p + p * p * p + n * p,
        ModelSpec::KernelRidgeRbf { .. } => n * n * p + n * n * n / 3 + n * n,
        ModelSpec::Mlp1Hidden {
            hidden_units,
            epochs,
            ..
        } => {
            let h = hidden_units as u64;
            let e = epochs as u64;
            let pairs = models::training_pair_cap(n as usize) as u64;
            let loss_cost = match loss {
                LossSpec::Mse => n,
                LossSpec::Multitask { .. } => n + pairs,
                _ => pairs,
            };
            e * (3 * n * (p * h + h) + loss_cost) + n * (p * h + h)
        }
    }
}

/// Largest working buffer (in f64 cells) a fit allocates.
pub fn estimate_peak_buffer(model: &ModelSpec, n: usize, p: usize) -> u64 {
    let (n, p) = (n as u64, p as u64);
    match *model {
        ModelSpec::RidgeLinear { .. } => n * p + p * p,
        ModelSpec::KernelRidgeRbf { .. } => n * n + n * p,
        ModelSpec::Mlp1Hidden { hidden_units, .. } => n * p + n * hidden_units as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    NumericFailure,
    BudgetExceeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub estimated_macs: u64,
    pub peak_buffer: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub validation: Vec<usize>,
    pub predictions: Vec<f64>,
    pub metrics: MetricBundle,
}

/// Everything one seed's pass over the folds produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub folds: Vec<FoldOutcome>,
    pub resources: ResourceUsage,
    pub param_count: usize,
    pub status: RunStatus,
    pub failure: Option<String>,
}

impl RunResult {
    pub fn fold_metrics(&self) -> Vec<MetricBundle> {
        self.folds.iter().map(|f| f.metrics).collect()
    }

    /// Mean over folds of the fold combined scores.
    pub fn mean_score(&self) -> f64 {
        MetricBundle::mean(&self.fold_metrics()).combined_score
    }

    pub fn canonical_metrics(&self) -> String {
        self.folds
            .iter()
            .map(|f| f.metrics.canonical_string())
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Resource estimate of `g` on `ds`.
pub fn resources_for(g: &Genome, ds: &Dataset) -> ResourceUsage {
    let p = g.data_ops().active_features();
    ResourceUsage {
        estimated_macs: estimate_macs(g.model(), g.loss(), ds.len(), p),
        peak_buffer: estimate_peak_buffer(g.model(), ds.len(), p),
    }
}

/// Fits and scores `g` on every fold of `split` with one seed. When a budget
/// is given and the analytic estimate exceeds it, nothing is trained.
pub fn run(g: &Genome, ds: &Dataset, split: &Split, seed: u64, weights: &ScoreWeights, budget: Option<u64>) -> Result<RunResult> {
    let pipeline = Pipeline::instantiate(g, ds)?;
    let resources = resources_for(g, ds);
    let mut result = RunResult {
        seed,
        folds: Vec::with_capacity(split.folds.len()),
        resources,
        param_count: 0,
        status: RunStatus::Ok,
        failure: None,
    };
    if budget.is_some_and(|b| resources.estimated_macs > b) {
        result.status = RunStatus::BudgetExceeded;
        return Ok(result);
    }
    for fold in &split.folds {
        let replica = match pipeline.fit(ds, &fold.train, seed) {
            Ok(r) => r,
            Err(NumericFailure(msg)) => {
                result.status = RunStatus::NumericFailure;
                result.failure = Some(msg);
                return Ok(result);
            }
        };
        result.param_count = result.param_count.max(replica.param_count());
        let predictions = replica.predict(&ds.features, &fold.validation, Some(&ds.version));
        let labels: Vec<f64> = fold.validation.iter().map(|&i| ds.labels[i]).collect();
        let pairs = PairSet::from_labels(&labels, DEFAULT_PAIR_EPS);
        let metrics = if predictions.iter().all(|v| v.is_finite()) {
            MetricBundle::compute(&predictions, &labels, &pairs, weights)
        } else {
            Err(Error::Argument("non-finite prediction".into()))
        };
        match metrics {
            Ok(metrics) => result.folds.push(FoldOutcome {
                validation: fold.validation.clone(),
                predictions,
                metrics,
            }),
            Err(e) => {
                result.status = RunStatus::NumericFailure;
                result.failure = Some(e.to_string());
                return Ok(result);
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{ModelFamily, PipelineContent};
    use crate::taskbench::{evaluation_split, generate, TaskSpec};

    fn task() -> Dataset {
        generate(&TaskSpec::default()).unwrap()
    }

    fn with(g: &Genome, f: impl FnOnce(&mut PipelineContent)) -> Genome {
        let mut c = g.content().clone();
        f(&mut c);
        g.with_content(c)
    }

    #[test]
    fn zscore_training_columns_are_standardized() {
        let ds = task();
        let train: Vec<usize> = (0..300).collect();
        let pre = Preprocessor::fit(&ds.features, &train, &[true; 9], Normalization::Zscore, None);
        let z = pre.transform(&ds.features, &train);
        for j in 0..z.cols() {
            let col = z.column(j);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_preprocessing_without_normalization() {
        let ds = task();
        let train: Vec<usize> = (0..100).collect();
        let mut mask = vec![true; 9];
        mask[8] = false;
        let pre = Preprocessor::fit(&ds.features, &train, &mask, Normalization::None, None);
        let z = pre.transform(&ds.features, &[7, 400]);
        assert_eq!(z.row(0), &ds.features.row(7)[..8]);
        assert_eq!(z.row(1), &ds.features.row(400)[..8]);
    }

    #[test]
    fn masked_leaky_column_never_reaches_model() {
        let ds = task();
        let mut g = Genome::default_for(9);
        g = with(&g, |c| c.data_ops.feature_mask[8] = false);
        let p = Pipeline::instantiate(&g, &ds).unwrap();
        let r = p.fit(&ds, &(0..300).collect::<Vec<_>>(), 0).unwrap();
        assert!(!r.preprocessor.columns().contains(&8));
        assert_eq!(r.param_count(), 9);
    }

    #[test]
    fn drift_compensation_equalizes_version_means() {
        let ds = task();
        let train: Vec<usize> = (0..ds.len()).filter(|i| i % 3 != 0).collect();
        let labels: Vec<f64> = train.iter().map(|&i| ds.labels[i]).collect();
        let versions: Vec<usize> = train.iter().map(|&i| ds.version[i]).collect();
        let d = DriftCorrection::fit(&labels, &versions);
        let comp = d.compensate(&labels, &versions);
        let mut means = Vec::new();
        for v in 0..2 {
            let vals: Vec<f64> = comp.iter().zip(&versions).filter(|(_, &w)| w == v).map(|(y, _)| *y).collect();
            means.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        assert!((means[0] - means[1]).abs() < 1e-9);
    }

    #[test]
    fn mask_dimension_mismatch_is_an_error() {
        let ds = task();
        let g = Genome::default_for(4);
        assert!(matches!(Pipeline::instantiate(&g, &ds), Err(Error::Instantiation(_))));
    }

    #[test]
    fn unfitted_pipeline_cannot_predict() {
        let ds = task();
        let p = Pipeline::instantiate(&Genome::default_for(9), &ds).unwrap();
        assert!(matches!(p.predict(&ds.features, &[0], None), Err(Error::State(_))));
    }

    #[test]
    fn closed_form_replicas_have_zero_spread() {
        let ds = task();
        let mut p = Pipeline::instantiate(&Genome::default_for(9), &ds).unwrap();
        let train: Vec<usize> = (0..400).collect();
        p.fit_replicas(&ds, &train, &[1, 2, 3]).unwrap();
        let rows: Vec<usize> = (400..450).collect();
        let (_, sigma) = p.predict_with_uncertainty(&ds.features, &rows, None).unwrap();
        assert!(sigma.iter().all(|s| *s < 1e-15));
    }

    #[test]
    fn two_replica_arithmetic() {
        let (mean, std) = ensemble_stats(&[vec![0.30], vec![0.32]]);
        assert!((mean[0] - 0.31).abs() < 1e-12);
        assert!((std[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn run_is_bit_reproducible() {
        let ds = task();
        let split = evaluation_split(&ds, crate::genome::SplitPolicy::ByFamily, 3, 5).unwrap();
        let g = with(&Genome::default_for(9), |c| {
            c.model = ModelSpec::defaults(ModelFamily::Mlp1Hidden);
            c.data_ops.feature_mask[8] = false;
        });
        let w = ScoreWeights::default();
        let a = run(&g, &ds, &split, 7, &w, None).unwrap();
        let b = run(&g, &ds, &split, 7, &w, None).unwrap();
        assert_eq!(a.status, RunStatus::Ok);
        assert_eq!(a, b);
    }

    #[test]
    fn over_budget_run_trains_nothing() {
        let ds = task();
        let split = evaluation_split(&ds, crate::genome::SplitPolicy::ByFamily, 3, 5).unwrap();
        let g = Genome::default_for(9);
        let r = run(&g, &ds, &split, 0, &ScoreWeights::default(), Some(10)).unwrap();
        assert_eq!(r.status, RunStatus::BudgetExceeded);
        assert!(r.folds.is_empty());
    }

    #[test]
    fn ridge_estimate_for_default_task() {
        let g = Genome::default_for(9);
        // 600*81 + 729 + 600*9
        assert_eq!(estimate_macs(g.model(), g.loss(), 600, 9), 48_600 + 729 + 5_400);
    }
}
